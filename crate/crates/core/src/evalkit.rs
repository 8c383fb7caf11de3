//! Offline evaluation over logged trajectories — capped importance-sampling
//! value estimates and pairwise ranking concordance per aspect — plus
//! ground-truth online evaluation in the simulator, the random and
//! imitation baselines, and paired report comparison.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{score_items, AgentBundle, AgentError, CollabMode};
use crate::env::{
    read_trajectory_log, Environment, EnvError, ItemCatalog, RequestRecord, HATE, N_ASPECTS,
};
use crate::ranking::plackett_luce_conditionals;
use crate::rng::RngStream;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("config: {0}")]
    Config(String),
    #[error("contract: {0}")]
    Contract(String),
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Agent(#[from] AgentError),
}

/// All logged requests of one user session, in round order.
#[derive(Debug, Clone, PartialEq)]
pub struct LoggedSession {
    pub session: u64,
    pub records: Vec<RequestRecord>,
}

impl LoggedSession {
    /// Undiscounted per-aspect return over the session's shown items,
    /// hate sign-flipped to match the environment's reward convention.
    pub fn returns(&self) -> [f64; N_ASPECTS] {
        let mut out = [0.0f64; N_ASPECTS];
        for record in &self.records {
            for fb in &record.feedback {
                for (aspect, slot) in out.iter_mut().enumerate() {
                    let v = fb.aspect(aspect);
                    *slot += if aspect == HATE { -v } else { v };
                }
            }
        }
        out
    }

    pub fn impressions(&self) -> usize {
        self.records.iter().map(|r| r.shown.len()).sum()
    }
}

/// A trajectory log grouped into sessions, validated for evaluation use.
#[derive(Debug, Clone, PartialEq)]
pub struct LoggedDataset {
    pub sessions: Vec<LoggedSession>,
}

impl LoggedDataset {
    pub fn from_records(records: Vec<RequestRecord>) -> Result<Self, EvalError> {
        if records.is_empty() {
            return Err(EvalError::Data("the trajectory log holds no records".into()));
        }
        let mut order: Vec<u64> = Vec::new();
        let mut by_session: HashMap<u64, Vec<RequestRecord>> = HashMap::new();
        for (idx, record) in records.into_iter().enumerate() {
            let line = idx + 1;
            if record.shown.len() != record.feedback.len()
                || record.shown.len() != record.propensities.len()
            {
                return Err(EvalError::Data(format!(
                    "record {line}: shown/feedback/propensity lengths disagree"
                )));
            }
            if record.shown.is_empty() {
                return Err(EvalError::Data(format!("record {line}: empty slate")));
            }
            if let Some(&p) = record.propensities.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
                return Err(EvalError::Data(format!(
                    "record {line}: propensity {p} outside (0, 1]"
                )));
            }
            if record.pool.windows(2).any(|w| w[0] >= w[1]) {
                return Err(EvalError::Data(format!(
                    "record {line}: pool ids must be strictly ascending"
                )));
            }
            for &id in &record.shown {
                if record.pool.binary_search(&id).is_err() {
                    return Err(EvalError::Data(format!(
                        "record {line}: shown item {id} is not in the pool"
                    )));
                }
            }
            if !by_session.contains_key(&record.session) {
                order.push(record.session);
            }
            by_session.entry(record.session).or_default().push(record);
        }
        let sessions = order
            .into_iter()
            .map(|session| {
                let mut records = by_session.remove(&session).expect("grouped above");
                records.sort_by_key(|r| r.round);
                LoggedSession { session, records }
            })
            .collect();
        Ok(LoggedDataset { sessions })
    }

    pub fn from_file(path: &Path) -> Result<Self, EvalError> {
        Self::from_records(read_trajectory_log(path)?)
    }

    pub fn n_sessions(&self) -> usize {
        self.sessions.len()
    }

    pub fn n_records(&self) -> usize {
        self.sessions.iter().map(|s| s.records.len()).sum()
    }

    pub fn n_impressions(&self) -> usize {
        self.sessions.iter().map(|s| s.impressions()).sum()
    }
}

/// Anything that can score a candidate pool for one request. The session id
/// and round are part of the interface so stochastic baselines can replay
/// the exact scores they produced when the log was written.
pub trait RankingPolicy: Sync {
    fn name(&self) -> &str;

    fn score(
        &self,
        session: u64,
        round: u32,
        state: &[f32],
        pool_ids: &[u32],
        pool_features: &[f32],
    ) -> Result<Vec<f32>, EvalError>;
}

/// The trained ranker: the main agent's action scores items by dot product.
pub struct BundlePolicy {
    bundle: AgentBundle,
    mode: CollabMode,
}

impl BundlePolicy {
    pub fn new(bundle: AgentBundle, mode: CollabMode) -> Self {
        BundlePolicy { bundle, mode }
    }

    pub fn bundle(&self) -> &AgentBundle {
        &self.bundle
    }
}

impl RankingPolicy for BundlePolicy {
    fn name(&self) -> &str {
        "mmrf"
    }

    fn score(
        &self,
        _session: u64,
        _round: u32,
        state: &[f32],
        _pool_ids: &[u32],
        pool_features: &[f32],
    ) -> Result<Vec<f32>, EvalError> {
        let actions = self.bundle.act(state, self.mode)?;
        let main = &actions[self.bundle.config().main_index()];
        Ok(score_items(main, pool_features)?)
    }
}

/// Uniform-random scores, reproducible per (session, round).
pub struct RandomPolicy {
    stream: RngStream,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        RandomPolicy { stream: RngStream::from_seed(seed).split_str("random-policy") }
    }
}

impl RankingPolicy for RandomPolicy {
    fn name(&self) -> &str {
        "random"
    }

    fn score(
        &self,
        session: u64,
        round: u32,
        _state: &[f32],
        pool_ids: &[u32],
        _pool_features: &[f32],
    ) -> Result<Vec<f32>, EvalError> {
        let mut rng = self.stream.split(session).split(round as u64);
        Ok((0..pool_ids.len()).map(|_| rng.uniform(-1.0, 1.0)).collect())
    }
}

/// Pointwise logistic imitation of the logging policy: shown items are
/// positives, sampled unshown pool-mates negatives. Scores are linear in
/// `[v, v⊙history, v⊙profile, 1]` where `v` is the item embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcPolicy {
    pub dim: usize,
    /// `3·dim + 1` weights, bias last.
    pub weights: Vec<f64>,
}

impl BcPolicy {
    fn phi(&self, item: &[f32], state: &[f32]) -> Vec<f64> {
        let d = self.dim;
        let mut out = Vec::with_capacity(3 * d + 1);
        for &v in item {
            out.push(v as f64);
        }
        for (i, &v) in item.iter().enumerate() {
            out.push(v as f64 * state[d + i] as f64);
        }
        for (i, &v) in item.iter().enumerate() {
            out.push(v as f64 * state[i] as f64);
        }
        out.push(1.0);
        out
    }

    fn logit(&self, item: &[f32], state: &[f32]) -> f64 {
        self.phi(item, state).iter().zip(&self.weights).map(|(x, w)| x * w).sum()
    }
}

impl RankingPolicy for BcPolicy {
    fn name(&self) -> &str {
        "bc"
    }

    fn score(
        &self,
        _session: u64,
        _round: u32,
        state: &[f32],
        pool_ids: &[u32],
        pool_features: &[f32],
    ) -> Result<Vec<f32>, EvalError> {
        if state.len() < 2 * self.dim {
            return Err(EvalError::Contract(format!(
                "state of width {} cannot hold two {}-wide blocks",
                state.len(),
                self.dim
            )));
        }
        Ok((0..pool_ids.len())
            .map(|i| self.logit(&pool_features[i * self.dim..(i + 1) * self.dim], state) as f32)
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BcConfig {
    pub lr: f64,
    pub epochs: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for BcConfig {
    fn default() -> Self {
        BcConfig { lr: 0.5, epochs: 30, l2: 1e-4, seed: 0 }
    }
}

/// A fitted imitation policy with its per-epoch losses (nonincreasing by
/// construction — each step is halved until it does not increase the loss)
/// and final training accuracy.
#[derive(Debug, Clone)]
pub struct BcFit {
    pub policy: BcPolicy,
    pub losses: Vec<f64>,
    pub accuracy: f64,
}

/// Fit the behavior-cloning baseline on shown-vs-unshown labels with
/// full-batch logistic regression.
pub fn train_bc(
    dataset: &LoggedDataset,
    catalog: &ItemCatalog,
    config: &BcConfig,
) -> Result<BcFit, EvalError> {
    if dataset.sessions.is_empty() {
        return Err(EvalError::Data("cannot fit the imitation baseline on no sessions".into()));
    }
    let d = catalog.dim();
    let template = BcPolicy { dim: d, weights: vec![0.0; 3 * d + 1] };
    // One fixed supervised set: every shown item, plus an equal number of
    // deterministically sampled unshown pool-mates per record.
    let neg_stream = RngStream::from_seed(config.seed).split_str("bc-negatives");
    let mut xs: Vec<Vec<f64>> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for session in &dataset.sessions {
        for record in &session.records {
            for &id in &record.shown {
                xs.push(template.phi(catalog.embedding(id), &record.state));
                ys.push(1.0);
            }
            let unshown: Vec<u32> = record
                .pool
                .iter()
                .copied()
                .filter(|id| !record.shown.contains(id))
                .collect();
            if unshown.is_empty() {
                continue;
            }
            let mut rng = neg_stream.split(session.session).split(record.round as u64);
            for _ in 0..record.shown.len() {
                let id = unshown[rng.index(unshown.len())];
                xs.push(template.phi(catalog.embedding(id), &record.state));
                ys.push(0.0);
            }
        }
    }

    let n = xs.len() as f64;
    let dim = 3 * d + 1;
    let loss_of = |w: &[f64]| -> f64 {
        let mut total = 0.0;
        for (x, &y) in xs.iter().zip(&ys) {
            let z: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum();
            // log(1 + e^{-z}) for y=1, log(1 + e^{z}) for y=0, stably.
            let margin = if y > 0.5 { z } else { -z };
            total += if margin > 0.0 {
                (-margin).exp().ln_1p()
            } else {
                -margin + margin.exp().ln_1p()
            };
        }
        total / n + config.l2 * w.iter().map(|v| v * v).sum::<f64>()
    };
    let grad_of = |w: &[f64]| -> Vec<f64> {
        let mut g = vec![0.0f64; dim];
        for (x, &y) in xs.iter().zip(&ys) {
            let z: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum();
            let p = if z >= 0.0 { 1.0 / (1.0 + (-z).exp()) } else { z.exp() / (1.0 + z.exp()) };
            let err = p - y;
            for (gi, &xi) in g.iter_mut().zip(x) {
                *gi += err * xi;
            }
        }
        for (gi, &wi) in g.iter_mut().zip(w) {
            *gi = *gi / n + 2.0 * config.l2 * wi;
        }
        g
    };

    let mut weights = vec![0.0f64; dim];
    let mut losses = Vec::with_capacity(config.epochs);
    let mut loss = loss_of(&weights);
    for _ in 0..config.epochs {
        let g = grad_of(&weights);
        let mut lr = config.lr;
        loop {
            let candidate: Vec<f64> =
                weights.iter().zip(&g).map(|(w, gi)| w - lr * gi).collect();
            let cand_loss = loss_of(&candidate);
            if cand_loss <= loss || lr < 1e-12 {
                weights = candidate;
                loss = cand_loss;
                break;
            }
            lr *= 0.5;
        }
        losses.push(loss);
    }

    let policy = BcPolicy { dim: d, weights };
    let correct = xs
        .iter()
        .zip(&ys)
        .filter(|(x, &y)| {
            let z: f64 = x.iter().zip(&policy.weights).map(|(a, b)| a * b).sum();
            (z > 0.0) == (y > 0.5)
        })
        .count();
    let accuracy = correct as f64 / n;
    Ok(BcFit { policy, losses, accuracy })
}

/// Flattened embeddings of the given pool ids, in order.
pub fn pool_features(catalog: &ItemCatalog, ids: &[u32]) -> Vec<f32> {
    let mut out = Vec::with_capacity(ids.len() * catalog.dim());
    for &id in ids {
        out.extend_from_slice(catalog.embedding(id));
    }
    out
}

/// Importance-sampling estimate details: per-aspect values plus the weight
/// spread, which is the first thing to inspect when estimates look off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NcisDetail {
    pub values: [f64; N_ASPECTS],
    pub sessions: usize,
    pub mean_weight: f64,
    pub min_weight: f64,
    pub max_weight: f64,
}

/// Capped importance-sampling value of `policy` on logged sessions: each
/// session weighs `Π_t min(cap, p_target(slate_t)/p_behavior(slate_t))`
/// with slate probabilities the sequential top-K selection products, and
/// the estimate is the weight-normalized mean session return per aspect.
pub fn ncis(
    dataset: &LoggedDataset,
    policy: &dyn RankingPolicy,
    catalog: &ItemCatalog,
    cap: f64,
    temperature: f64,
) -> Result<NcisDetail, EvalError> {
    if dataset.sessions.is_empty() {
        return Err(EvalError::Data("no sessions to evaluate".into()));
    }
    if !(cap > 0.0) {
        return Err(EvalError::Contract(format!("cap ({cap}) must be positive")));
    }
    if !(temperature > 0.0) {
        return Err(EvalError::Contract(format!("temperature ({temperature}) must be positive")));
    }
    let per_session: Vec<(f64, [f64; N_ASPECTS])> = dataset
        .sessions
        .par_iter()
        .map(|session| -> Result<(f64, [f64; N_ASPECTS]), EvalError> {
            let mut weight = 1.0f64;
            for record in &session.records {
                let features = pool_features(catalog, &record.pool);
                let scores = policy.score(
                    session.session,
                    record.round,
                    &record.state,
                    &record.pool,
                    &features,
                )?;
                let chosen: Vec<usize> = record
                    .shown
                    .iter()
                    .map(|id| {
                        record.pool.binary_search(id).map_err(|_| {
                            EvalError::Data(format!("shown item {id} missing from its pool"))
                        })
                    })
                    .collect::<Result<_, _>>()?;
                let target = plackett_luce_conditionals(&scores, &chosen, temperature);
                let log_ratio: f64 = target
                    .iter()
                    .zip(&record.propensities)
                    .map(|(&t, &b)| t.ln() - b.ln())
                    .sum();
                weight *= cap.min(log_ratio.exp());
            }
            Ok((weight, session.returns()))
        })
        .collect::<Result<_, _>>()?;

    let total_weight: f64 = per_session.iter().map(|(w, _)| w).sum();
    if !(total_weight > 0.0) {
        return Err(EvalError::Data(
            "every session weight vanished; the target policy is too far from the log".into(),
        ));
    }
    let mut values = [0.0f64; N_ASPECTS];
    for (w, returns) in &per_session {
        for (v, r) in values.iter_mut().zip(returns) {
            *v += w * r;
        }
    }
    for v in values.iter_mut() {
        *v /= total_weight;
    }
    let min_weight = per_session.iter().map(|(w, _)| *w).fold(f64::INFINITY, f64::min);
    let max_weight = per_session.iter().map(|(w, _)| *w).fold(0.0, f64::max);
    Ok(NcisDetail {
        values,
        sessions: per_session.len(),
        mean_weight: total_weight / per_session.len() as f64,
        min_weight,
        max_weight,
    })
}

/// One aspect's concordance summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaucAspect {
    /// Impression-weighted mean per-user concordance; None when no user had
    /// both label values for this aspect.
    pub value: Option<f64>,
    pub scorable_users: usize,
    pub skipped_users: usize,
}

/// Pairwise concordance between policy scores and realized feedback, per
/// user and aspect: pairs with different labels count 1 when the scores
/// order them like the labels, ½ on score ties. Users are weighted by
/// impression count; constant-label users are skipped and counted.
pub fn gauc(
    dataset: &LoggedDataset,
    policy: &dyn RankingPolicy,
    catalog: &ItemCatalog,
) -> Result<Vec<GaucAspect>, EvalError> {
    if dataset.sessions.is_empty() {
        return Err(EvalError::Data("no sessions to evaluate".into()));
    }
    // (score, per-aspect label) per impression, per user.
    let per_user: Vec<Vec<(f64, [f64; N_ASPECTS])>> = dataset
        .sessions
        .par_iter()
        .map(|session| -> Result<Vec<(f64, [f64; N_ASPECTS])>, EvalError> {
            let mut impressions = Vec::with_capacity(session.impressions());
            for record in &session.records {
                let features = pool_features(catalog, &record.pool);
                let scores = policy.score(
                    session.session,
                    record.round,
                    &record.state,
                    &record.pool,
                    &features,
                )?;
                for (id, fb) in record.shown.iter().zip(&record.feedback) {
                    let pos = record.pool.binary_search(id).map_err(|_| {
                        EvalError::Data(format!("shown item {id} missing from its pool"))
                    })?;
                    let mut labels = [0.0f64; N_ASPECTS];
                    for (aspect, slot) in labels.iter_mut().enumerate() {
                        *slot = fb.aspect(aspect);
                    }
                    impressions.push((scores[pos] as f64, labels));
                }
            }
            Ok(impressions)
        })
        .collect::<Result<_, _>>()?;

    let mut out = Vec::with_capacity(N_ASPECTS);
    for aspect in 0..N_ASPECTS {
        let mut weighted = 0.0f64;
        let mut total_weight = 0.0f64;
        let mut scorable = 0usize;
        let mut skipped = 0usize;
        for impressions in &per_user {
            let mut concordant = 0.0f64;
            let mut pairs = 0.0f64;
            for i in 0..impressions.len() {
                for j in (i + 1)..impressions.len() {
                    let (si, li) = (impressions[i].0, impressions[i].1[aspect]);
                    let (sj, lj) = (impressions[j].0, impressions[j].1[aspect]);
                    if li == lj {
                        continue;
                    }
                    pairs += 1.0;
                    let (hi, lo) = if li > lj { (si, sj) } else { (sj, si) };
                    if hi > lo {
                        concordant += 1.0;
                    } else if hi == lo {
                        concordant += 0.5;
                    }
                }
            }
            if pairs == 0.0 {
                if !impressions.is_empty() {
                    skipped += 1;
                }
                continue;
            }
            scorable += 1;
            let weight = impressions.len() as f64;
            weighted += weight * concordant / pairs;
            total_weight += weight;
        }
        out.push(GaucAspect {
            value: (total_weight > 0.0).then(|| weighted / total_weight),
            scorable_users: scorable,
            skipped_users: skipped,
        });
    }
    Ok(out)
}

/// Single-aspect concordance; errors when no user is scorable for it.
pub fn gauc_aspect(
    dataset: &LoggedDataset,
    policy: &dyn RankingPolicy,
    catalog: &ItemCatalog,
    aspect: usize,
) -> Result<f64, EvalError> {
    if aspect >= N_ASPECTS {
        return Err(EvalError::Contract(format!("aspect index {aspect} out of range")));
    }
    gauc(dataset, policy, catalog)?[aspect].value.ok_or_else(|| {
        EvalError::Data(format!("no user has two distinct labels for aspect {aspect}"))
    })
}

/// Ground-truth mean returns of a policy run in the simulator without
/// exploration noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineReport {
    pub episodes: usize,
    pub mean_returns: [f64; N_ASPECTS],
    pub mean_discounted: [f64; N_ASPECTS],
    pub mean_steps: f64,
}

pub fn evaluate_online(
    env: &Environment,
    policy: &dyn RankingPolicy,
    episodes: usize,
    gamma: f64,
    rng: &RngStream,
) -> Result<OnlineReport, EvalError> {
    if episodes == 0 {
        return Err(EvalError::Contract("episodes must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(EvalError::Contract(format!("gamma ({gamma}) must be in [0, 1)")));
    }
    let ec = env.config();
    let per_episode: Vec<([f64; N_ASPECTS], [f64; N_ASPECTS], usize)> = (0..episodes)
        .into_par_iter()
        .map(|episode| -> Result<([f64; N_ASPECTS], [f64; N_ASPECTS], usize), EvalError> {
            let mut ep_rng = rng.split(episode as u64);
            let (mut session, _) = env.begin_session(&mut ep_rng);
            let mut returns = [0.0f64; N_ASPECTS];
            let mut discounted = [0.0f64; N_ASPECTS];
            let mut discount = 1.0f64;
            let mut steps = 0usize;
            loop {
                env.candidate_pool(&mut session, &mut ep_rng)?;
                let features = session.snapshot(ec).features(ec);
                let scores = {
                    let pool = session.pool().expect("pool drawn above");
                    policy.score(
                        session.id,
                        session.round() as u32,
                        &features,
                        &pool.ids,
                        &pool.features,
                    )?
                };
                let (_, rewards, _, done) = env.step(&mut session, &scores, &mut ep_rng)?;
                for aspect in 0..N_ASPECTS {
                    returns[aspect] += rewards[aspect];
                    discounted[aspect] += discount * rewards[aspect];
                }
                discount *= gamma;
                steps += 1;
                if done {
                    break;
                }
            }
            Ok((returns, discounted, steps))
        })
        .collect::<Result<_, _>>()?;

    let inv = 1.0 / episodes as f64;
    let mut mean_returns = [0.0f64; N_ASPECTS];
    let mut mean_discounted = [0.0f64; N_ASPECTS];
    let mut mean_steps = 0.0f64;
    for (r, d, s) in &per_episode {
        for aspect in 0..N_ASPECTS {
            mean_returns[aspect] += r[aspect] * inv;
            mean_discounted[aspect] += d[aspect] * inv;
        }
        mean_steps += *s as f64 * inv;
    }
    Ok(OnlineReport { episodes, mean_returns, mean_discounted, mean_steps })
}

/// Run a policy in the simulator and collect the full request log, ready
/// for `write_trajectory_log` or `LoggedDataset::from_records`.
pub fn simulate_log(
    env: &Environment,
    policy: &dyn RankingPolicy,
    episodes: usize,
    rng: &RngStream,
) -> Result<Vec<RequestRecord>, EvalError> {
    if episodes == 0 {
        return Err(EvalError::Contract("episodes must be at least 1".into()));
    }
    let ec = env.config();
    let per_episode: Vec<Vec<RequestRecord>> = (0..episodes)
        .into_par_iter()
        .map(|episode| -> Result<Vec<RequestRecord>, EvalError> {
            let mut ep_rng = rng.split(episode as u64);
            let (mut session, _) = env.begin_session(&mut ep_rng);
            let mut records = Vec::with_capacity(ec.horizon);
            loop {
                env.candidate_pool(&mut session, &mut ep_rng)?;
                let features = session.snapshot(ec).features(ec);
                let round = session.round() as u32;
                let (scores, pool_ids) = {
                    let pool = session.pool().expect("pool drawn above");
                    let scores = policy.score(
                        session.id,
                        round,
                        &features,
                        &pool.ids,
                        &pool.features,
                    )?;
                    (scores, pool.ids.clone())
                };
                let (log, _, _, done) = env.step(&mut session, &scores, &mut ep_rng)?;
                records.push(RequestRecord {
                    session: session.id,
                    round,
                    state: features,
                    pool: pool_ids,
                    scores,
                    shown: log.shown,
                    propensities: log.propensities,
                    feedback: log.feedback,
                    done,
                });
                if done {
                    break;
                }
            }
            Ok(records)
        })
        .collect::<Result<_, _>>()?;
    Ok(per_episode.into_iter().flatten().collect())
}

/// Everything one evaluation run produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    pub seed: u64,
    pub config_hash: String,
    pub ncis: Option<NcisDetail>,
    pub gauc: Option<Vec<GaucAspect>>,
    pub online: Option<OnlineReport>,
}

/// Summary table, one row per aspect with its concordance and
/// importance-sampling estimate (empty cells when a metric was not run).
pub fn eval_csv(report: &EvalReport) -> String {
    let mut out = String::from("aspect,gauc,ncis\n");
    for aspect in 0..N_ASPECTS {
        let name = crate::env::ASPECT_NAMES[aspect];
        let gauc_cell = report
            .gauc
            .as_ref()
            .and_then(|g| g[aspect].value)
            .map_or(String::new(), |v| v.to_string());
        let ncis_cell = report
            .ncis
            .as_ref()
            .map_or(String::new(), |n| n.values[aspect].to_string());
        out.push_str(&format!("{name},{gauc_cell},{ncis_cell}\n"));
    }
    out
}

/// One compared metric: absolute delta and relative lift of A over B.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub metric: String,
    pub a: f64,
    pub b: f64,
    pub delta: f64,
    /// `(a − b) / |b|`; None when `b` is zero.
    pub lift: Option<f64>,
}

/// Per-aspect deltas and relative lifts between two reports covering the
/// same metric sets.
pub fn compare(a: &EvalReport, b: &EvalReport) -> Result<Vec<MetricDelta>, EvalError> {
    for (name, lhs, rhs) in [
        ("ncis", a.ncis.is_some(), b.ncis.is_some()),
        ("gauc", a.gauc.is_some(), b.gauc.is_some()),
        ("online", a.online.is_some(), b.online.is_some()),
    ] {
        if lhs != rhs {
            return Err(EvalError::Contract(format!(
                "reports disagree on whether {name} was computed"
            )));
        }
    }
    let mut out = Vec::new();
    let mut push = |metric: String, av: f64, bv: f64| {
        let delta = av - bv;
        let lift = (bv != 0.0).then(|| delta / bv.abs());
        out.push(MetricDelta { metric, a: av, b: bv, delta, lift });
    };
    for aspect in 0..N_ASPECTS {
        let name = crate::env::ASPECT_NAMES[aspect];
        if let (Some(an), Some(bn)) = (&a.ncis, &b.ncis) {
            push(format!("ncis.{name}"), an.values[aspect], bn.values[aspect]);
        }
        if let (Some(ag), Some(bg)) = (&a.gauc, &b.gauc) {
            if let (Some(av), Some(bv)) = (ag[aspect].value, bg[aspect].value) {
                push(format!("gauc.{name}"), av, bv);
            }
        }
        if let (Some(ao), Some(bo)) = (&a.online, &b.online) {
            push(format!("online.{name}"), ao.mean_returns[aspect], bo.mean_returns[aspect]);
        }
    }
    Ok(out)
}
