//! Synthetic short-video session simulator.
//!
//! A session serves `horizon` ranking requests. Each request draws a
//! candidate pool, the policy scores it, the top-K items by score are shown,
//! and the simulated user reacts on seven feedback aspects. Positive
//! interactions lengthen watching, hate shortens it and raises the chance
//! the user leaves early. The simulator also answers counterfactual queries
//! (feedback for items that were *not* shown) so that simulated rewards can
//! be validated against ground truth, and it reads/writes newline-delimited
//! JSON trajectory logs for offline evaluation.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ranking::{plackett_luce_conditionals, top_k_indices};
use crate::rng::RngStream;

/// Number of feedback aspects.
pub const N_ASPECTS: usize = 7;
/// Aspect order used everywhere: slot 6 is watch time, the main objective.
pub const ASPECT_NAMES: [&str; N_ASPECTS] =
    ["click", "like", "follow", "comment", "hate", "long_view", "watch_time"];
pub const CLICK: usize = 0;
pub const LIKE: usize = 1;
pub const FOLLOW: usize = 2;
pub const COMMENT: usize = 3;
pub const HATE: usize = 4;
pub const LONG_VIEW: usize = 5;
pub const WATCH_TIME: usize = 6;

/// Version header written as the first line of every trajectory log.
pub const TRAJ_SCHEMA: &str = "mmrf-traj/1";

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("config: {0}")]
    Config(String),
    #[error("contract: {0}")]
    Contract(String),
    #[error("session is already over")]
    SessionOver,
    #[error("no active candidate pool; draw one before stepping")]
    MissingPool,
    #[error("item {0} is not in the current candidate pool")]
    ItemNotInPool(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("trajectory log line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Simulator parameters. All fields are plain data so configs can be
/// constructed directly in tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Catalog size; must cover at least one candidate pool.
    pub n_items: usize,
    /// Candidates scored per request.
    pub pool_size: usize,
    /// Items shown per request (top-K of the score vector).
    pub slate_size: usize,
    /// Requests per session.
    pub horizon: usize,
    /// Item / preference embedding dimension.
    pub embed_dim: usize,
    /// Item duration range in seconds.
    pub duration_min: f32,
    pub duration_max: f32,
    /// Watch ratio at or above which a view counts as a long view.
    pub long_view_threshold: f32,
    /// Watch-ratio boost per positive interaction on the same item.
    pub kappa_pos: f32,
    /// Watch-ratio penalty when the item is hated.
    pub kappa_hate: f32,
    /// Per-aspect propensity intercepts (watch bias shifts the base ratio).
    pub bias_click: f32,
    pub bias_like: f32,
    pub bias_follow: f32,
    pub bias_comment: f32,
    pub bias_hate: f32,
    pub bias_watch: f32,
    /// Leave-probability parameters: sigmoid(bias + scale * cumulative hates).
    pub leave_bias: f32,
    pub leave_scale: f32,
    /// Noise added to the observable profile on top of the latent preferences.
    pub profile_noise: f32,
    /// Weight of the positive-interaction rows mixed into the profile.
    pub peer_weight: f32,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            n_items: 2000,
            pool_size: 400,
            slate_size: 6,
            horizon: 20,
            embed_dim: 16,
            duration_min: 5.0,
            duration_max: 60.0,
            long_view_threshold: 0.8,
            kappa_pos: 0.08,
            kappa_hate: 0.25,
            bias_click: -0.5,
            bias_like: -1.2,
            bias_follow: -2.2,
            bias_comment: -1.8,
            bias_hate: -2.5,
            bias_watch: 0.0,
            leave_bias: -4.0,
            leave_scale: 0.8,
            profile_noise: 0.1,
            peer_weight: 0.5,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::Config(m));
        if self.n_items < self.pool_size {
            return bad(format!(
                "n_items ({}) must be at least pool_size ({})",
                self.n_items, self.pool_size
            ));
        }
        if self.slate_size == 0 || self.slate_size > self.pool_size {
            return bad(format!(
                "slate_size ({}) must be in 1..=pool_size ({})",
                self.slate_size, self.pool_size
            ));
        }
        if self.horizon == 0 {
            return bad("horizon must be positive".into());
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive".into());
        }
        if !(self.duration_min > 0.0 && self.duration_max >= self.duration_min) {
            return bad(format!(
                "durations must satisfy 0 < duration_min ({}) <= duration_max ({})",
                self.duration_min, self.duration_max
            ));
        }
        if !(self.long_view_threshold > 0.0 && self.long_view_threshold <= 1.0) {
            return bad(format!(
                "long_view_threshold ({}) must be in (0, 1]",
                self.long_view_threshold
            ));
        }
        if self.kappa_pos < 0.0 || self.kappa_hate < 0.0 {
            return bad("kappa_pos and kappa_hate must be nonnegative".into());
        }
        if self.profile_noise < 0.0 {
            return bad("profile_noise must be nonnegative".into());
        }
        Ok(())
    }

    /// Length of the flattened state-feature vector.
    pub fn state_dim(&self) -> usize {
        3 * self.embed_dim + N_ASPECTS + 2
    }
}

/// Fixed item universe: embeddings and durations, generated once per seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemCatalog {
    dim: usize,
    embeddings: Vec<f32>,
    durations: Vec<f32>,
}

impl ItemCatalog {
    pub fn len(&self) -> usize {
        self.durations.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.durations.is_empty()
    }

    pub fn embedding(&self, item: u32) -> &[f32] {
        let i = item as usize;
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    pub fn duration(&self, item: u32) -> f32 {
        self.durations[item as usize]
    }
}

/// Ground-truth user: latent per-aspect preference rows plus the coupling
/// and leave parameters copied from the config. Policies never see this.
#[derive(Debug, Clone)]
pub struct UserModel {
    dim: usize,
    /// `N_ASPECTS x dim` row-major latent preference matrix.
    pref: Vec<f32>,
    bias: [f32; N_ASPECTS],
    kappa_pos: f32,
    kappa_hate: f32,
    leave_bias: f32,
    leave_scale: f32,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

impl UserModel {
    fn draw(config: &EnvConfig, rng: &mut RngStream) -> Self {
        let d = config.embed_dim;
        let scale = (1.0 / d as f32).sqrt();
        let pref: Vec<f32> = (0..N_ASPECTS * d).map(|_| rng.normal() * scale).collect();
        UserModel {
            dim: d,
            pref,
            bias: [
                config.bias_click,
                config.bias_like,
                config.bias_follow,
                config.bias_comment,
                config.bias_hate,
                0.0,
                config.bias_watch,
            ],
            kappa_pos: config.kappa_pos,
            kappa_hate: config.kappa_hate,
            leave_bias: config.leave_bias,
            leave_scale: config.leave_scale,
        }
    }

    fn pref_row(&self, aspect: usize) -> &[f32] {
        &self.pref[aspect * self.dim..(aspect + 1) * self.dim]
    }

    /// Closed-form probability of a positive reaction on a binary aspect
    /// (before the hate/like exclusion), or the base watch ratio for
    /// `WATCH_TIME`.
    pub(crate) fn propensity(&self, aspect: usize, item_embedding: &[f32]) -> f64 {
        sigmoid(dot(self.pref_row(aspect), item_embedding) + self.bias[aspect] as f64)
    }

    /// One feedback draw for a single item. Consumes exactly five Bernoulli
    /// draws from `rng` so paired counterfactual streams stay aligned.
    fn react(&self, item_embedding: &[f32], duration: f32, rng: &mut RngStream) -> FeedbackVector {
        let click = rng.bernoulli(self.propensity(CLICK, item_embedding)) as u8;
        let mut like = rng.bernoulli(self.propensity(LIKE, item_embedding)) as u8;
        let follow = rng.bernoulli(self.propensity(FOLLOW, item_embedding)) as u8;
        let comment = rng.bernoulli(self.propensity(COMMENT, item_embedding)) as u8;
        let hate = rng.bernoulli(self.propensity(HATE, item_embedding)) as u8;
        if hate == 1 {
            like = 0;
        }
        let base = self.propensity(WATCH_TIME, item_embedding);
        let positives = (click + like + follow + comment) as f64;
        let ratio = (base + self.kappa_pos as f64 * positives
            - self.kappa_hate as f64 * hate as f64)
            .clamp(0.0, 1.0) as f32;
        FeedbackVector {
            click,
            like,
            follow,
            comment,
            hate,
            long_view: 0, // caller sets from the configured threshold
            watch_ratio: ratio,
            watch_time: ratio * duration,
        }
    }

    fn leave_probability(&self, cumulative_hates: f64) -> f64 {
        sigmoid(self.leave_bias as f64 + self.leave_scale as f64 * cumulative_hates)
    }
}

/// User reaction to one shown item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackVector {
    pub click: u8,
    pub like: u8,
    pub follow: u8,
    pub comment: u8,
    pub hate: u8,
    pub long_view: u8,
    pub watch_ratio: f32,
    pub watch_time: f32,
}

impl FeedbackVector {
    /// Binary indicator (or seconds for watch time) for one aspect.
    pub fn aspect(&self, aspect: usize) -> f64 {
        match aspect {
            CLICK => self.click as f64,
            LIKE => self.like as f64,
            FOLLOW => self.follow as f64,
            COMMENT => self.comment as f64,
            HATE => self.hate as f64,
            LONG_VIEW => self.long_view as f64,
            WATCH_TIME => self.watch_time as f64,
            _ => panic!("aspect index {aspect} out of range"),
        }
    }
}

/// One exposure: what was shown, how the user reacted, the logging policy's
/// selection probabilities, and which pool candidates were *not* shown. The
/// unshown candidates deliberately carry no feedback fields.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureLog {
    pub shown: Vec<u32>,
    pub feedback: Vec<FeedbackVector>,
    pub propensities: Vec<f64>,
    pub unshown: Vec<u32>,
}

/// Candidate pool for one request: item ids ascending, one feature row per
/// candidate, and the pool's mean embedding (part of the state features).
#[derive(Debug, Clone, PartialEq)]
pub struct Pool {
    pub ids: Vec<u32>,
    /// `pool_size x embed_dim`, row i = embedding of `ids[i]`.
    pub features: Vec<f32>,
    pub durations: Vec<f32>,
    pub mean: Vec<f32>,
}

/// Observable state snapshot handed to policies.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub profile: Vec<f32>,
    pub history_mean: Vec<f32>,
    /// Cumulative per-aspect feedback counts (watch slot holds seconds).
    pub counters: [f64; N_ASPECTS],
    pub round: usize,
    pub horizon: usize,
    pub pool_mean: Vec<f32>,
}

impl State {
    /// Flattened features, fixed order:
    /// profile, history mean, normalized counters, round-progress pair,
    /// pool mean. Length = `EnvConfig::state_dim()`.
    pub fn features(&self, config: &EnvConfig) -> Vec<f32> {
        let mut out = Vec::with_capacity(config.state_dim());
        out.extend_from_slice(&self.profile);
        out.extend_from_slice(&self.history_mean);
        let seen = (self.round * config.slate_size).max(1) as f64;
        for (i, &c) in self.counters.iter().enumerate() {
            let norm = if i == WATCH_TIME { seen * config.duration_max as f64 } else { seen };
            out.push((c / norm) as f32);
        }
        let t = self.round as f32;
        let horizon = self.horizon as f32;
        out.push(t / horizon);
        out.push((horizon - t) / horizon);
        out.extend_from_slice(&self.pool_mean);
        out
    }
}

/// A running session: the drawn user plus behavior accumulators.
#[derive(Debug, Clone)]
pub struct Session {
    pub id: u64,
    user: UserModel,
    profile: Vec<f32>,
    round: usize,
    counters: [f64; N_ASPECTS],
    history_num: Vec<f64>,
    history_den: f64,
    cumulative_hates: f64,
    done: bool,
    pool: Option<Pool>,
}

impl Session {
    pub fn round(&self) -> usize {
        self.round
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn pool(&self) -> Option<&Pool> {
        self.pool.as_ref()
    }

    #[cfg(test)]
    pub(crate) fn user(&self) -> &UserModel {
        &self.user
    }

    pub(crate) fn snapshot(&self, config: &EnvConfig) -> State {
        let d = config.embed_dim;
        let history_mean = if self.history_den > 0.0 {
            self.history_num.iter().map(|&x| (x / self.history_den) as f32).collect()
        } else {
            vec![0.0; d]
        };
        State {
            profile: self.profile.clone(),
            history_mean,
            counters: self.counters,
            round: self.round,
            horizon: config.horizon,
            pool_mean: self.pool.as_ref().map_or_else(|| vec![0.0; d], |p| p.mean.clone()),
        }
    }
}

/// The simulator: immutable catalog plus config. Sessions are independent,
/// so parallel rollouts only need distinct rng streams per session.
#[derive(Debug, Clone)]
pub struct Environment {
    config: EnvConfig,
    catalog: ItemCatalog,
}

impl Environment {
    pub fn new(config: EnvConfig, seed: u64) -> Result<Self, EnvError> {
        config.validate()?;
        let mut rng = RngStream::from_seed(seed).split_str("catalog");
        let d = config.embed_dim;
        let embeddings: Vec<f32> = (0..config.n_items * d).map(|_| rng.normal()).collect();
        let durations: Vec<f32> = (0..config.n_items)
            .map(|_| rng.uniform(config.duration_min, config.duration_max))
            .collect();
        Ok(Environment { config, catalog: ItemCatalog { dim: d, embeddings, durations } })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn catalog(&self) -> &ItemCatalog {
        &self.catalog
    }

    /// Draw a fresh user and return the session with its initial state.
    pub fn begin_session(&self, rng: &mut RngStream) -> (Session, State) {
        let d = self.config.embed_dim;
        let id = rng.u64();
        let user = UserModel::draw(&self.config, rng);
        // Observable profile: the latent watch row blended with the positive
        // interaction rows, plus noise. Hate stays hidden.
        let mut profile = user.pref_row(WATCH_TIME).to_vec();
        for aspect in [CLICK, LIKE, FOLLOW, COMMENT] {
            let row = user.pref_row(aspect);
            for (p, &r) in profile.iter_mut().zip(row) {
                *p += self.config.peer_weight * r / 4.0;
            }
        }
        for p in profile.iter_mut() {
            *p += self.config.profile_noise * rng.normal();
        }
        let session = Session {
            id,
            user,
            profile,
            round: 0,
            counters: [0.0; N_ASPECTS],
            history_num: vec![0.0; d],
            history_den: 0.0,
            cumulative_hates: 0.0,
            done: false,
            pool: None,
        };
        let state = session.snapshot(&self.config);
        (session, state)
    }

    /// Sample this request's candidate pool (without replacement, ids
    /// ascending) and attach it to the session.
    pub fn candidate_pool<'s>(
        &self,
        session: &'s mut Session,
        rng: &mut RngStream,
    ) -> Result<&'s Pool, EnvError> {
        if session.done {
            return Err(EnvError::SessionOver);
        }
        let d = self.config.embed_dim;
        let mut ids: Vec<u32> = rng
            .sample_distinct(self.catalog.len(), self.config.pool_size)
            .into_iter()
            .map(|i| i as u32)
            .collect();
        ids.sort_unstable();
        let mut features = Vec::with_capacity(ids.len() * d);
        let mut durations = Vec::with_capacity(ids.len());
        let mut mean = vec![0.0f64; d];
        for &id in &ids {
            let e = self.catalog.embedding(id);
            features.extend_from_slice(e);
            durations.push(self.catalog.duration(id));
            for (m, &x) in mean.iter_mut().zip(e) {
                *m += x as f64;
            }
        }
        let mean: Vec<f32> = mean.iter().map(|&m| (m / ids.len() as f64) as f32).collect();
        session.pool = Some(Pool { ids, features, durations, mean });
        Ok(session.pool.as_ref().unwrap())
    }

    /// Expose the top-K scored candidates, collect feedback, and advance the
    /// session. Returns the exposure record, the per-aspect reward sums over
    /// the shown items (hate negated so every objective is maximized), the
    /// next state, and the done flag.
    pub fn step(
        &self,
        session: &mut Session,
        scores: &[f32],
        rng: &mut RngStream,
    ) -> Result<(ExposureLog, [f64; N_ASPECTS], State, bool), EnvError> {
        if session.done {
            return Err(EnvError::SessionOver);
        }
        let pool = session.pool.take().ok_or(EnvError::MissingPool)?;
        if scores.len() != pool.ids.len() {
            return Err(EnvError::Contract(format!(
                "got {} scores for a pool of {}",
                scores.len(),
                pool.ids.len()
            )));
        }
        if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(EnvError::Contract(format!("non-finite score {bad}")));
        }
        let k = self.config.slate_size;
        let top = top_k_indices(scores, k);
        let propensities = plackett_luce_conditionals(scores, &top, 1.0);
        let shown: Vec<u32> = top.iter().map(|&i| pool.ids[i]).collect();
        let unshown: Vec<u32> =
            pool.ids.iter().copied().filter(|id| !shown.contains(id)).collect();

        let d = self.config.embed_dim;
        let mut feedback = Vec::with_capacity(k);
        let mut rewards = [0.0f64; N_ASPECTS];
        for &pos in &top {
            let id = pool.ids[pos];
            let embedding = &pool.features[pos * d..(pos + 1) * d];
            let mut item_rng = rng.split(id as u64);
            let mut fb = session.user.react(embedding, pool.durations[pos], &mut item_rng);
            fb.long_view = (fb.watch_ratio >= self.config.long_view_threshold) as u8;
            for aspect in 0..N_ASPECTS {
                let value = fb.aspect(aspect);
                rewards[aspect] += if aspect == HATE { -value } else { value };
                session.counters[aspect] += value;
            }
            session.cumulative_hates += fb.hate as f64;
            for (h, &x) in session.history_num.iter_mut().zip(embedding) {
                *h += fb.watch_ratio as f64 * x as f64;
            }
            session.history_den += fb.watch_ratio as f64;
            feedback.push(fb);
        }

        session.round += 1;
        let leave = rng
            .split_str("leave")
            .bernoulli(session.user.leave_probability(session.cumulative_hates));
        session.done = session.round >= self.config.horizon || leave;
        let state = session.snapshot(&self.config);
        let log = ExposureLog { shown, feedback, propensities, unshown };
        Ok((log, rewards, state, session.done))
    }

    /// Ground-truth feedback for a hypothetical exposure of `items` (all of
    /// which must sit in the current pool). Session state is not advanced.
    /// Per-item draws come from `rng.split(item_id)`, exactly as in `step`,
    /// so the same stream reproduces the same feedback.
    pub fn counterfactual_feedback(
        &self,
        session: &Session,
        items: &[u32],
        rng: &RngStream,
    ) -> Result<Vec<FeedbackVector>, EnvError> {
        let pool = session.pool.as_ref().ok_or(EnvError::MissingPool)?;
        let d = self.config.embed_dim;
        items
            .iter()
            .map(|&id| {
                let pos = pool
                    .ids
                    .binary_search(&id)
                    .map_err(|_| EnvError::ItemNotInPool(id))?;
                let embedding = &pool.features[pos * d..(pos + 1) * d];
                let mut item_rng = rng.split(id as u64);
                let mut fb =
                    session.user.react(embedding, pool.durations[pos], &mut item_rng);
                fb.long_view = (fb.watch_ratio >= self.config.long_view_threshold) as u8;
                Ok(fb)
            })
            .collect()
    }
}

/// One logged ranking request. `feedback[i]` belongs to `shown[i]`; the
/// pool entries outside `shown` were not exposed and carry no feedback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub session: u64,
    pub round: u32,
    pub state: Vec<f32>,
    pub pool: Vec<u32>,
    pub scores: Vec<f32>,
    pub shown: Vec<u32>,
    pub propensities: Vec<f64>,
    pub feedback: Vec<FeedbackVector>,
    pub done: bool,
}

#[derive(Serialize, Deserialize)]
struct SchemaHeader {
    schema: String,
}

/// Write records as newline-delimited JSON with a leading schema header.
pub fn write_trajectory_log(path: &Path, records: &[RequestRecord]) -> Result<(), EnvError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut file, &SchemaHeader { schema: TRAJ_SCHEMA.into() })
        .map_err(|e| EnvError::Parse { line: 1, message: e.to_string() })?;
    file.write_all(b"\n")?;
    for (i, record) in records.iter().enumerate() {
        serde_json::to_writer(&mut file, record)
            .map_err(|e| EnvError::Parse { line: i + 2, message: e.to_string() })?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

/// Read a trajectory log, validating the schema header. Parse failures name
/// the 1-based line.
pub fn read_trajectory_log(path: &Path) -> Result<Vec<RequestRecord>, EnvError> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut records = Vec::new();
    let mut saw_header = false;
    for (idx, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if !saw_header {
            let header: SchemaHeader = serde_json::from_str(&line)
                .map_err(|e| EnvError::Parse { line: idx + 1, message: e.to_string() })?;
            if header.schema != TRAJ_SCHEMA {
                return Err(EnvError::Parse {
                    line: idx + 1,
                    message: format!("unsupported schema {:?}", header.schema),
                });
            }
            saw_header = true;
            continue;
        }
        let record: RequestRecord = serde_json::from_str(&line)
            .map_err(|e| EnvError::Parse { line: idx + 1, message: e.to_string() })?;
        records.push(record);
    }
    Ok(records)
}
