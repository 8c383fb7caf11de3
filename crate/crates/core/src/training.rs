//! The training loop: joint rollouts with exploration noise, per-agent real
//! and simulated replay buffers, critic updates on the TD error, actor
//! updates that mix the shared main objective with each agent's private
//! objective, target networks, and the feedback-model refresh — plus the
//! ablation switches (concat collaboration, disabled or constant-reward
//! non-impression handling).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{
    act_joint, critic_value, score_items, AgentBundle, AgentConfig, AgentError, CollabMode,
};
use crate::env::{EnvConfig, EnvError, Environment, Pool, HATE, N_ASPECTS, WATCH_TIME};
use crate::nn::{adam_step, AdamParams, AdamState, GradMap, ModelGraph, NnError, ParamStore, Var};
use crate::ranking::top_k_indices;
use crate::rng::RngStream;
use crate::worldmodel::{
    compose_slate, mean_embedding, normalized_targets, WmError, WmSequence, WmStep, WorldModel,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("contract: {0}")]
    Contract(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Wm(#[from] WmError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// One stored experience for one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f32>,
    pub action: Vec<f32>,
    pub reward: f64,
    pub next_state: Vec<f32>,
    pub done: bool,
    /// True when the slate was really shown; false for simulated feedback.
    pub impression: bool,
    pub agent: usize,
}

/// Fixed-capacity FIFO ring with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    next: usize,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer { items: Vec::new(), capacity, next: 0, inserted: 0 }
    }

    pub fn push(&mut self, t: Transition) {
        assert!(t.reward.is_finite(), "non-finite reward {}", t.reward);
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
        self.inserted += 1;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Uniform sample with replacement; empty when the buffer is empty.
    pub fn sample(&self, rng: &mut RngStream, n: usize) -> Vec<&Transition> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| &self.items[rng.index(self.items.len())]).collect()
    }
}

/// How the trainer rewards retained non-impression slates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonImpressionMode {
    /// Feedback-model rewards with the uncertainty bonus (the full method).
    Simulated,
    /// Store nothing (the data-ablation variant).
    Disabled,
    /// Store every retained slate with this fixed reward for every agent
    /// (the negative-sample variant).
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub gamma: f64,
    pub critic_lr: f64,
    /// Learning rate of the shared main-objective actor branch.
    pub actor_lr: f64,
    /// Learning rate of each auxiliary agent's private-objective branch.
    pub aux_lr: f64,
    pub wm_lr: f64,
    /// Exploration noise stddev added per action coordinate.
    pub sigma: f64,
    /// Target-network blend coefficient.
    pub tau: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Random candidate actions tried per round (the `m` of the rollout).
    pub random_actions: usize,
    /// Probability that each random slate is retained for simulation.
    pub nonimpression_rate: f64,
    /// Fraction of every batch drawn from the simulated buffer.
    pub simulated_share: f64,
    pub epochs: usize,
    pub sessions_per_epoch: usize,
    pub updates_per_epoch: usize,
    pub wm_updates_per_epoch: usize,
    /// Recent real sessions kept as the feedback model's training window.
    pub wm_window: usize,
    /// Epochs without a new best mean watch time before early stop (0 = off).
    pub plateau_patience: usize,
    pub collab: CollabMode,
    pub nonimpression: NonImpressionMode,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            gamma: 0.95,
            critic_lr: 1e-3,
            actor_lr: 1e-4,
            aux_lr: 1e-4,
            wm_lr: 1e-3,
            sigma: 0.1,
            tau: 0.005,
            batch_size: 64,
            buffer_capacity: 100_000,
            random_actions: 4,
            nonimpression_rate: 0.25,
            simulated_share: 0.25,
            epochs: 30,
            sessions_per_epoch: 24,
            updates_per_epoch: 40,
            wm_updates_per_epoch: 2,
            wm_window: 96,
            plateau_patience: 5,
            collab: CollabMode::Attention,
            nonimpression: NonImpressionMode::Simulated,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("training.gamma ({}) must be in [0, 1)", self.gamma));
        }
        for (key, v) in [
            ("training.critic_lr", self.critic_lr),
            ("training.actor_lr", self.actor_lr),
            ("training.wm_lr", self.wm_lr),
        ] {
            if v <= 0.0 || !v.is_finite() {
                return bad(format!("{key} ({v}) must be positive"));
            }
        }
        if self.aux_lr < 0.0 || !self.aux_lr.is_finite() {
            return bad(format!("training.aux_lr ({}) must be nonnegative", self.aux_lr));
        }
        if self.sigma < 0.0 || !self.sigma.is_finite() {
            return bad(format!("training.sigma ({}) must be nonnegative", self.sigma));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("training.tau ({}) must be in (0, 1]", self.tau));
        }
        if self.batch_size == 0 {
            return bad("training.batch_size must be positive".into());
        }
        if self.buffer_capacity == 0 {
            return bad("training.buffer_capacity must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.nonimpression_rate) {
            return bad(format!(
                "training.nonimpression_rate ({}) must be in [0, 1]",
                self.nonimpression_rate
            ));
        }
        if !(0.0..1.0).contains(&self.simulated_share) {
            return bad(format!(
                "training.simulated_share ({}) must be in [0, 1)",
                self.simulated_share
            ));
        }
        if self.sessions_per_epoch == 0 {
            return bad("training.sessions_per_epoch must be positive".into());
        }
        if self.wm_window == 0 {
            return bad("training.wm_window must be positive".into());
        }
        if let NonImpressionMode::Constant(c) = self.nonimpression {
            if !c.is_finite() {
                return bad(format!("training.nonimpression constant ({c}) must be finite"));
            }
        }
        Ok(())
    }
}

/// Per-agent real (impression) and simulated buffers, kept strictly apart.
#[derive(Debug)]
pub struct AgentBuffers {
    real: Vec<ReplayBuffer>,
    simulated: Vec<ReplayBuffer>,
}

impl AgentBuffers {
    pub fn new(n_agents: usize, capacity: usize) -> Self {
        AgentBuffers {
            real: (0..n_agents).map(|_| ReplayBuffer::new(capacity)).collect(),
            simulated: (0..n_agents).map(|_| ReplayBuffer::new(capacity)).collect(),
        }
    }

    fn check_agent(&self, agent: usize) -> Result<(), TrainError> {
        if agent >= self.real.len() {
            return Err(TrainError::Contract(format!(
                "agent index {agent} out of range for {} buffers",
                self.real.len()
            )));
        }
        Ok(())
    }

    pub fn push_real(&mut self, t: Transition) -> Result<(), TrainError> {
        self.check_agent(t.agent)?;
        if !t.impression {
            return Err(TrainError::Contract(
                "simulated transition offered to a real buffer".into(),
            ));
        }
        self.real[t.agent].push(t);
        Ok(())
    }

    pub fn push_simulated(&mut self, t: Transition) -> Result<(), TrainError> {
        self.check_agent(t.agent)?;
        if t.impression {
            return Err(TrainError::Contract(
                "real transition offered to a simulated buffer".into(),
            ));
        }
        self.simulated[t.agent].push(t);
        Ok(())
    }

    pub fn real(&self, agent: usize) -> &ReplayBuffer {
        &self.real[agent]
    }

    pub fn simulated(&self, agent: usize) -> &ReplayBuffer {
        &self.simulated[agent]
    }

    /// One training batch: mostly real experience with the configured share
    /// of simulated experience when any is available.
    pub fn mixed_batch(
        &self,
        agent: usize,
        batch_size: usize,
        simulated_share: f64,
        rng: &mut RngStream,
    ) -> Vec<&Transition> {
        if self.real[agent].is_empty() {
            return Vec::new();
        }
        let want_sim = if self.simulated[agent].is_empty() {
            0
        } else {
            (batch_size as f64 * simulated_share).round() as usize
        };
        let mut out = self.real[agent].sample(rng, batch_size - want_sim);
        out.extend(self.simulated[agent].sample(rng, want_sim));
        out
    }
}

/// The aspect whose reward agent `i` maximizes (the last agent always owns
/// watch time; the others take the aspects in canonical order).
pub fn agent_aspect(n_agents: usize, agent: usize) -> usize {
    if agent + 1 == n_agents {
        WATCH_TIME
    } else {
        agent
    }
}

/// Per-session undiscounted aspect returns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SessionStats {
    pub returns: [f64; N_ASPECTS],
    pub steps: usize,
}

/// A retained non-impression slate awaiting a simulated reward.
#[derive(Debug, Clone)]
pub struct SimCandidate {
    /// Session round (0-based) the candidate was drawn at.
    pub round: usize,
    pub state: Vec<f32>,
    /// The uniform-random ranking action that produced the slate.
    pub action: Vec<f32>,
    /// Feedback-model slate features.
    pub slate: Vec<f32>,
    /// Raw mean duration of the slate's items (seconds).
    pub mean_duration: f32,
    pub next_state: Vec<f32>,
    pub done: bool,
}

/// Everything one session rollout produces.
#[derive(Debug, Clone)]
pub struct RolloutProduct {
    pub transitions: Vec<Transition>,
    pub wm_sequence: WmSequence,
    pub candidates: Vec<SimCandidate>,
    pub stats: SessionStats,
}

/// Joint deterministic actions of the policy stored in `store`.
fn policy_actions(
    store: &ParamStore,
    cfg: &AgentConfig,
    features: &[f32],
    mode: CollabMode,
) -> Result<Vec<Vec<f32>>, TrainError> {
    let mut mg = ModelGraph::new(store);
    let s = mg.graph.input_row(features);
    let fwd = act_joint(&mut mg, cfg, s, mode)?;
    Ok(fwd.actions.iter().map(|&a| mg.graph.value(a).to_vec()).collect())
}

fn q_from(
    store: &ParamStore,
    cfg: &AgentConfig,
    agent: usize,
    state: &[f32],
    action: &[f32],
) -> Result<f64, TrainError> {
    let mut mg = ModelGraph::new(store);
    let s = mg.graph.input_row(state);
    let a = mg.graph.input_row(action);
    let q = critic_value(&mut mg, cfg, agent, s, a)?;
    Ok(mg.graph.scalar_value(q) as f64)
}

/// Feedback-model slate features plus the slate's raw mean duration.
fn slate_features(
    pool: &Pool,
    top: &[usize],
    action: &[f32],
    ec: &EnvConfig,
) -> (Vec<f32>, f32) {
    let d = ec.embed_dim;
    let mut embeds = Vec::with_capacity(top.len() * d);
    let mut duration = 0.0f64;
    for &i in top {
        embeds.extend_from_slice(&pool.features[i * d..(i + 1) * d]);
        duration += pool.durations[i] as f64;
    }
    let mean_dur = (duration / top.len().max(1) as f64) as f32;
    let mean = mean_embedding(&embeds, d);
    (compose_slate(&mean, action, mean_dur, ec.duration_max), mean_dur)
}

/// Draw `m` uniform-random ranking actions over the pool; each resulting
/// top-K slate is independently retained with probability `rate`. Exactly
/// `action_dim + 1` rng values are consumed per candidate whether or not it
/// is retained, so downstream streams never shift with the retention rate.
pub fn sample_nonimpression(
    pool: &Pool,
    slate_size: usize,
    action_dim: usize,
    bound: f32,
    m: usize,
    rate: f64,
    rng: &mut RngStream,
) -> Result<Vec<(Vec<f32>, Vec<usize>)>, TrainError> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(TrainError::Contract(format!("retention rate {rate} must be in [0, 1]")));
    }
    let mut out = Vec::new();
    for _ in 0..m {
        let action: Vec<f32> = (0..action_dim).map(|_| rng.uniform(-bound, bound)).collect();
        let retain = rng.bernoulli(rate);
        if !retain {
            continue;
        }
        let scores = score_items(&action, &pool.features)?;
        out.push((action, top_k_indices(&scores, slate_size)));
    }
    Ok(out)
}

/// Roll one full session under the joint policy with exploration noise.
///
/// Every agent stores its own action with its own aspect reward; the
/// feedback-model sequence and the retained random slates come out with the
/// transitions so the caller can ingest everything in a deterministic order.
pub fn collect_rollout(
    env: &Environment,
    bundle: &AgentBundle,
    tc: &TrainingConfig,
    rng: &RngStream,
) -> Result<RolloutProduct, TrainError> {
    let acfg = bundle.config();
    let ec = env.config();
    let n = acfg.n_agents;
    if n > N_ASPECTS {
        return Err(TrainError::Config(format!(
            "{n} agents but only {N_ASPECTS} feedback aspects"
        )));
    }
    if acfg.state_dim != ec.state_dim() {
        return Err(TrainError::Config(format!(
            "agents.state_dim ({}) does not match the environment's ({})",
            acfg.state_dim,
            ec.state_dim()
        )));
    }
    let bound = acfg.action_bound;
    let mut env_rng = rng.split_str("env");
    let mut noise_rng = rng.split_str("noise");
    let mut cand_rng = rng.split_str("nonimpression");

    let (mut session, _) = env.begin_session(&mut env_rng);
    env.candidate_pool(&mut session, &mut env_rng)?;

    let mut transitions = Vec::new();
    let mut wm_steps = Vec::new();
    let mut candidates = Vec::new();
    let mut returns = [0.0f64; N_ASPECTS];
    let mut steps = 0usize;

    loop {
        let features = session.snapshot(ec).features(ec);
        let mut actions = policy_actions(&bundle.params, acfg, &features, tc.collab)?;
        for action in actions.iter_mut() {
            for x in action.iter_mut() {
                *x = (*x + tc.sigma as f32 * noise_rng.normal()).clamp(-bound, bound);
            }
        }

        let (scores, real_slate, pending) = {
            let pool = session.pool().expect("pool attached before stepping");
            let main = &actions[acfg.main_index()];
            let scores = score_items(main, &pool.features)?;
            let real_top = top_k_indices(&scores, ec.slate_size);
            let (real_slate, _) = slate_features(pool, &real_top, main, ec);
            let retained = sample_nonimpression(
                pool,
                ec.slate_size,
                acfg.action_dim,
                bound,
                tc.random_actions,
                tc.nonimpression_rate,
                &mut cand_rng,
            )?;
            let pending: Vec<(Vec<f32>, Vec<f32>, f32)> = retained
                .into_iter()
                .map(|(action, top)| {
                    let (slate, mean_dur) = slate_features(pool, &top, &action, ec);
                    (action, slate, mean_dur)
                })
                .collect();
            (scores, real_slate, pending)
        };

        let (log, rewards, next_state, done) = env.step(&mut session, &scores, &mut env_rng)?;
        let next_features = if done {
            next_state.features(ec)
        } else {
            // Draw the next pool eagerly so s_{t+1} carries its pool mean,
            // exactly as the policy will see it on the next request.
            env.candidate_pool(&mut session, &mut env_rng)?;
            session.snapshot(ec).features(ec)
        };

        for agent in 0..n {
            transitions.push(Transition {
                state: features.clone(),
                action: actions[agent].clone(),
                reward: rewards[agent_aspect(n, agent)],
                next_state: next_features.clone(),
                done,
                impression: true,
                agent,
            });
        }
        wm_steps.push(WmStep {
            state: features.clone(),
            slate: real_slate,
            targets: normalized_targets(&log.feedback),
            impression: true,
        });
        for (action, slate, mean_duration) in pending {
            candidates.push(SimCandidate {
                round: steps,
                state: features.clone(),
                action,
                slate,
                mean_duration,
                next_state: next_features.clone(),
                done,
            });
        }
        for aspect in 0..N_ASPECTS {
            returns[aspect] += rewards[aspect];
        }
        steps += 1;
        if done {
            break;
        }
    }

    Ok(RolloutProduct {
        transitions,
        wm_sequence: WmSequence { steps: wm_steps },
        candidates,
        stats: SessionStats { returns, steps },
    })
}

/// Turn retained non-impression slates into simulated transitions according
/// to the configured mode. Returns how many transitions were stored.
///
/// In `Simulated` mode the feedback model's recurrent state is replayed
/// through each session's real steps, so every candidate is scored with the
/// hidden state the model had at that round. An untrained model simply
/// yields nothing (there is no epoch-zero simulated data).
pub fn simulate_and_store(
    wm: Option<&WorldModel>,
    products: &[RolloutProduct],
    tc: &TrainingConfig,
    n_agents: usize,
    buffers: &mut AgentBuffers,
) -> Result<usize, TrainError> {
    let mut stored = 0usize;
    match tc.nonimpression {
        NonImpressionMode::Disabled => Ok(0),
        NonImpressionMode::Constant(c) => {
            for product in products {
                for cand in &product.candidates {
                    for agent in 0..n_agents {
                        buffers.push_simulated(Transition {
                            state: cand.state.clone(),
                            action: cand.action.clone(),
                            reward: c,
                            next_state: cand.next_state.clone(),
                            done: cand.done,
                            impression: false,
                            agent,
                        })?;
                        stored += 1;
                    }
                }
            }
            Ok(stored)
        }
        NonImpressionMode::Simulated => {
            let wm = wm.ok_or_else(|| {
                TrainError::Config(
                    "non-impression mode is `simulated` but no feedback model is present".into(),
                )
            })?;
            if wm.trained_epochs() == 0 {
                return Ok(0);
            }
            let lambda = wm.config().lambda;
            for product in products {
                let mut hidden = wm.initial_hidden();
                let mut next_cand = 0usize;
                for (round, step) in product.wm_sequence.steps.iter().enumerate() {
                    while next_cand < product.candidates.len()
                        && product.candidates[next_cand].round == round
                    {
                        let cand = &product.candidates[next_cand];
                        let rewards = wm.simulate_all(
                            &hidden,
                            &cand.state,
                            &cand.slate,
                            lambda,
                            cand.mean_duration,
                        )?;
                        for agent in 0..n_agents {
                            buffers.push_simulated(Transition {
                                state: cand.state.clone(),
                                action: cand.action.clone(),
                                reward: rewards[agent_aspect(n_agents, agent)],
                                next_state: cand.next_state.clone(),
                                done: cand.done,
                                impression: false,
                                agent,
                            })?;
                            stored += 1;
                        }
                        next_cand += 1;
                    }
                    let (_, _, h) = wm.observe(&hidden, &step.state, &step.slate)?;
                    hidden = h;
                }
            }
            Ok(stored)
        }
    }
}

/// TD target `r + γ·Q'(s', π'(s'))` from the target networks; done
/// transitions never bootstrap.
fn bootstrap_target(
    bundle: &AgentBundle,
    agent: usize,
    t: &Transition,
    gamma: f64,
    mode: CollabMode,
) -> Result<f64, TrainError> {
    if t.done {
        return Ok(t.reward);
    }
    let cfg = bundle.config();
    let next_actions = policy_actions(&bundle.target, cfg, &t.next_state, mode)?;
    let q_next = q_from(&bundle.target, cfg, agent, &t.next_state, &next_actions[agent])?;
    Ok(t.reward + gamma * q_next)
}

/// The TD error δ = r + γ·Q'(s', π'(s')) − Q(s, a), with the bootstrap term
/// dropped exactly on done transitions.
pub fn td_error(
    bundle: &AgentBundle,
    agent: usize,
    t: &Transition,
    gamma: f64,
    mode: CollabMode,
) -> Result<f64, TrainError> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(TrainError::Contract(format!("gamma ({gamma}) must be in [0, 1)")));
    }
    let target = bootstrap_target(bundle, agent, t, gamma, mode)?;
    let q = q_from(&bundle.params, bundle.config(), agent, &t.state, &t.action)?;
    Ok(target - q)
}

/// One semi-gradient critic step on the mean of ½δ² over the batch. TD
/// targets come from the frozen target networks; only this agent's critic
/// parameters move. Returns the batch loss.
pub fn update_critic(
    bundle: &mut AgentBundle,
    agent: usize,
    batch: &[&Transition],
    gamma: f64,
    lr: f64,
    opt: &mut AdamState,
    mode: CollabMode,
) -> Result<f64, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Contract("empty critic batch".into()));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(TrainError::Contract(format!("gamma ({gamma}) must be in [0, 1)")));
    }
    let targets: Vec<f64> = batch
        .iter()
        .map(|t| bootstrap_target(bundle, agent, t, gamma, mode))
        .collect::<Result<_, _>>()?;

    let cfg = bundle.config().clone();
    let mut mg = ModelGraph::new(&bundle.params);
    let mut acc: Option<Var> = None;
    for (t, &y) in batch.iter().zip(&targets) {
        let s = mg.graph.input_row(&t.state);
        let a = mg.graph.input_row(&t.action);
        let q = critic_value(&mut mg, &cfg, agent, s, a)?;
        let target = mg.graph.input_row(&[y as f32]);
        let delta = mg.graph.sub(target, q)?;
        let sq = mg.graph.mul(delta, delta)?;
        acc = Some(match acc {
            None => sq,
            Some(prev) => mg.graph.add(prev, sq)?,
        });
    }
    let loss = mg.graph.affine(acc.expect("nonempty batch"), 0.5 / batch.len() as f32, 0.0);
    let loss_value = mg.graph.scalar_value(loss) as f64;
    let mut grads = mg.graph.backward(loss)?;
    let prefix = format!("agent.{agent}.critic.");
    grads.retain(|name, _| name.starts_with(&prefix));
    adam_step(&mut bundle.params, &grads, opt, lr, AdamParams::default())?;
    Ok(loss_value)
}

/// Raw (unfiltered) gradients of the actor objective over a batch of states:
/// maximize `mean Q_main(s, π(s)) + (β/α)·mean Σ_aux Q_i(s, π_i(s))`.
/// With `alpha == 0` the objective is the auxiliary sum alone. The returned
/// map still contains critic-parameter gradients (the main critic is part
/// of the graph); `update_actors` filters before applying.
pub fn actor_gradients(
    bundle: &AgentBundle,
    states: &[&[f32]],
    alpha: f64,
    beta: f64,
    mode: CollabMode,
) -> Result<(GradMap, f64), TrainError> {
    if states.is_empty() {
        return Err(TrainError::Contract("empty actor batch".into()));
    }
    let cfg = bundle.config();
    let n = cfg.n_agents;
    let main = cfg.main_index();
    let aux_scale = if alpha > 0.0 { beta / alpha } else { 1.0 };
    let include_main = alpha > 0.0;
    let include_aux = beta > 0.0;
    if !include_main && !include_aux {
        return Err(TrainError::Contract("both actor rates are zero".into()));
    }

    let mut mg = ModelGraph::new(&bundle.params);
    let mut main_acc: Option<Var> = None;
    let mut aux_acc: Option<Var> = None;
    for &state in states {
        let s = mg.graph.input_row(state);
        let fwd = act_joint(&mut mg, cfg, s, mode)?;
        if include_main {
            let q = critic_value(&mut mg, cfg, main, s, fwd.actions[main])?;
            main_acc = Some(match main_acc {
                None => q,
                Some(prev) => mg.graph.add(prev, q)?,
            });
        }
        if include_aux {
            for agent in 0..n {
                if agent == main {
                    continue;
                }
                let q = critic_value(&mut mg, cfg, agent, s, fwd.actions[agent])?;
                aux_acc = Some(match aux_acc {
                    None => q,
                    Some(prev) => mg.graph.add(prev, q)?,
                });
            }
        }
    }
    let inv = 1.0 / states.len() as f32;
    let mut objective: Option<Var> = main_acc.map(|v| mg.graph.affine(v, inv, 0.0));
    if let Some(aux) = aux_acc {
        let scaled = mg.graph.affine(aux, inv * aux_scale as f32, 0.0);
        objective = Some(match objective {
            None => scaled,
            Some(m) => mg.graph.add(m, scaled)?,
        });
    }
    let objective = objective.expect("at least one branch active");
    let loss = mg.graph.affine(objective, -1.0, 0.0);
    let value = mg.graph.scalar_value(objective) as f64;
    let grads = mg.graph.backward(loss)?;
    Ok((grads, value))
}

/// One joint actor step: the shared main-objective branch moves every
/// agent's policy parameters; each auxiliary agent's private branch is
/// folded in at weight β/α. Critics stay frozen. Returns per-agent policy
/// gradient norms (encoder + actor parameters).
pub fn update_actors(
    bundle: &mut AgentBundle,
    states: &[&[f32]],
    alpha: f64,
    beta: f64,
    opt: &mut AdamState,
    mode: CollabMode,
) -> Result<Vec<f64>, TrainError> {
    let n = bundle.config().n_agents;
    if states.is_empty() {
        return Err(TrainError::Contract("empty actor batch".into()));
    }
    if alpha == 0.0 && beta == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let (mut grads, _) = actor_gradients(bundle, states, alpha, beta, mode)?;
    grads.retain(|name, _| {
        name.contains(".actor.") || name.contains(".encoder.") || name.starts_with("shared_attn.")
    });
    let mut norms = vec![0.0f64; n];
    for (name, g) in &grads {
        if let Some(rest) = name.strip_prefix("agent.") {
            if let Some((idx, _)) = rest.split_once('.') {
                if let Ok(agent) = idx.parse::<usize>() {
                    norms[agent] += g.data().iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
                }
            }
        }
    }
    for norm in norms.iter_mut() {
        *norm = norm.sqrt();
    }
    let lr = if alpha > 0.0 { alpha } else { beta };
    adam_step(&mut bundle.params, &grads, opt, lr, AdamParams::default())?;
    Ok(norms)
}

/// Blend every target parameter toward its online twin:
/// `target ← τ·online + (1−τ)·target`.
pub fn polyak_update(bundle: &mut AgentBundle, tau: f64) -> Result<(), TrainError> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(TrainError::Contract(format!("tau ({tau}) must be in (0, 1]")));
    }
    let names: Vec<String> = bundle.params.names().cloned().collect();
    for name in names {
        let online = bundle.params.get(&name)?.data().to_vec();
        let target = bundle.target.get_mut(&name)?;
        for (t, &o) in target.data_mut().iter_mut().zip(&online) {
            *t = (tau * o as f64 + (1.0 - tau) * *t as f64) as f32;
        }
    }
    Ok(())
}

/// One epoch row of the training report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub sessions: usize,
    /// Mean per-session aspect returns over this epoch's rollouts.
    pub mean_returns: [f64; N_ASPECTS],
    pub mean_watch_time: f64,
    pub mean_steps: f64,
    /// Mean critic loss per agent over this epoch's update rounds.
    pub critic_losses: Vec<f64>,
    pub actor_grad_norm: f64,
    pub wm_loss: Option<f64>,
    pub real_buffer: usize,
    pub simulated_buffer: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epochs: Vec<EpochMetrics>,
    pub final_mean_watch_time: f64,
    pub best_mean_watch_time: f64,
    pub stopped_early: bool,
    pub total_sessions: usize,
}

impl TrainingReport {
    /// Per-epoch metrics as CSV
    /// (epoch, watchtime, click, like, follow, comment, hate, longview,
    /// critic_loss_0.., wm_loss).
    pub fn to_csv(&self) -> String {
        let n = self.epochs.first().map_or(0, |e| e.critic_losses.len());
        let mut out = String::from("epoch,watchtime,click,like,follow,comment,hate,longview");
        for i in 0..n {
            out.push_str(&format!(",critic_loss_{i}"));
        }
        out.push_str(",wm_loss\n");
        for e in &self.epochs {
            let r = &e.mean_returns;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}",
                e.epoch,
                r[WATCH_TIME],
                r[crate::env::CLICK],
                r[crate::env::LIKE],
                r[crate::env::FOLLOW],
                r[crate::env::COMMENT],
                r[HATE],
                r[crate::env::LONG_VIEW],
            ));
            for loss in &e.critic_losses {
                out.push_str(&format!(",{loss}"));
            }
            match e.wm_loss {
                Some(l) => out.push_str(&format!(",{l}\n")),
                None => out.push_str(",\n"),
            }
        }
        out
    }
}

/// The trained bundle, feedback model, shared optimizer state, and report.
#[derive(Debug)]
pub struct TrainOutcome {
    pub report: TrainingReport,
    pub bundle: AgentBundle,
    pub worldmodel: WorldModel,
    pub opt: AdamState,
}

/// The full training loop, deterministic from `root`: per epoch, parallel
/// session rollouts (order-stable reduce), buffer ingestion, simulated-data
/// generation, critic/actor/target updates, and a feedback-model refresh.
pub fn train(
    env: &Environment,
    acfg: &AgentConfig,
    wcfg: &crate::worldmodel::WmConfig,
    tc: &TrainingConfig,
    root: &RngStream,
) -> Result<TrainOutcome, TrainError> {
    tc.validate()?;
    let ec = env.config();
    if acfg.state_dim != ec.state_dim() {
        return Err(TrainError::Config(format!(
            "agents.state_dim ({}) does not match the environment's ({})",
            acfg.state_dim,
            ec.state_dim()
        )));
    }
    let expected_slate = ec.embed_dim + acfg.action_dim + 1;
    if wcfg.state_dim != ec.state_dim() || wcfg.slate_dim != expected_slate {
        return Err(TrainError::Config(format!(
            "worldmodel dims (state {}, slate {}) do not match the run (state {}, slate {})",
            wcfg.state_dim,
            wcfg.slate_dim,
            ec.state_dim(),
            expected_slate
        )));
    }

    let mut bundle = AgentBundle::new(acfg.clone(), &root.split_str("agents"))?;
    let mut wm = WorldModel::new(wcfg.clone(), &root.split_str("worldmodel"))?;
    let n = acfg.n_agents;
    let mut buffers = AgentBuffers::new(n, tc.buffer_capacity);
    let mut wm_dataset: Vec<WmSequence> = Vec::new();
    let mut opt = AdamState::new();

    let rollout_root = root.split_str("rollout");
    let update_root = root.split_str("updates");

    let mut report = TrainingReport {
        epochs: Vec::new(),
        final_mean_watch_time: 0.0,
        best_mean_watch_time: f64::NEG_INFINITY,
        stopped_early: false,
        total_sessions: 0,
    };
    let mut best_epoch = 0usize;

    let epoch_budget = tc.epochs.max(1);
    for epoch in 0..epoch_budget {
        let metrics_only = tc.epochs == 0;

        // Parallel rollouts with a deterministic stream per session; the
        // ordered collect makes ingestion independent of thread count.
        let epoch_stream = rollout_root.split(epoch as u64);
        let products: Vec<RolloutProduct> = (0..tc.sessions_per_epoch)
            .into_par_iter()
            .map(|s| collect_rollout(env, &bundle, tc, &epoch_stream.split(s as u64)))
            .collect::<Result<_, _>>()?;

        let mut mean_returns = [0.0f64; N_ASPECTS];
        let mut mean_steps = 0.0f64;
        for product in &products {
            for aspect in 0..N_ASPECTS {
                mean_returns[aspect] += product.stats.returns[aspect];
            }
            mean_steps += product.stats.steps as f64;
        }
        let inv = 1.0 / products.len() as f64;
        for r in mean_returns.iter_mut() {
            *r *= inv;
        }
        mean_steps *= inv;
        report.total_sessions += products.len();

        let mut wm_loss = None;
        let mut critic_losses = vec![0.0f64; n];
        let mut critic_counts = vec![0usize; n];
        let mut actor_norm = 0.0f64;
        let mut actor_rounds = 0usize;

        if !metrics_only {
            for product in &products {
                for t in &product.transitions {
                    buffers.push_real(t.clone())?;
                }
                wm_dataset.push(product.wm_sequence.clone());
            }
            if wm_dataset.len() > tc.wm_window {
                let excess = wm_dataset.len() - tc.wm_window;
                wm_dataset.drain(..excess);
            }
            simulate_and_store(Some(&wm), &products, tc, n, &mut buffers)?;

            let mut upd_rng = update_root.split(epoch as u64);
            for _ in 0..tc.updates_per_epoch {
                for agent in 0..n {
                    let batch =
                        buffers.mixed_batch(agent, tc.batch_size, tc.simulated_share, &mut upd_rng);
                    if batch.is_empty() {
                        continue;
                    }
                    let loss = update_critic(
                        &mut bundle,
                        agent,
                        &batch,
                        tc.gamma,
                        tc.critic_lr,
                        &mut opt,
                        tc.collab,
                    )?;
                    critic_losses[agent] += loss;
                    critic_counts[agent] += 1;
                }
                let actor_batch = buffers.mixed_batch(
                    bundle.config().main_index(),
                    tc.batch_size,
                    tc.simulated_share,
                    &mut upd_rng,
                );
                if !actor_batch.is_empty() {
                    let states: Vec<&[f32]> =
                        actor_batch.iter().map(|t| t.state.as_slice()).collect();
                    let norms = update_actors(
                        &mut bundle,
                        &states,
                        tc.actor_lr,
                        tc.aux_lr,
                        &mut opt,
                        tc.collab,
                    )?;
                    actor_norm += norms.iter().sum::<f64>();
                    actor_rounds += 1;
                }
                polyak_update(&mut bundle, tc.tau)?;
            }

            if !wm_dataset.is_empty() {
                for _ in 0..tc.wm_updates_per_epoch {
                    wm_loss = Some(wm.update(&wm_dataset, tc.wm_lr, &mut opt)?);
                }
            }
        }

        for (loss, &count) in critic_losses.iter_mut().zip(&critic_counts) {
            if count > 0 {
                *loss /= count as f64;
            }
        }
        if actor_rounds > 0 {
            actor_norm /= actor_rounds as f64;
        }

        let watch = mean_returns[WATCH_TIME];
        report.epochs.push(EpochMetrics {
            epoch,
            sessions: products.len(),
            mean_returns,
            mean_watch_time: watch,
            mean_steps,
            critic_losses,
            actor_grad_norm: actor_norm,
            wm_loss,
            real_buffer: buffers.real(0).len(),
            simulated_buffer: buffers.simulated(0).len(),
        });
        report.final_mean_watch_time = watch;
        if watch > report.best_mean_watch_time {
            report.best_mean_watch_time = watch;
            best_epoch = epoch;
        }
        if tc.plateau_patience > 0 && epoch - best_epoch >= tc.plateau_patience {
            report.stopped_early = true;
            break;
        }
    }

    Ok(TrainOutcome { report, bundle, worldmodel: wm, opt })
}

/// Merge agent and feedback-model parameters into one store for
/// checkpointing; names never collide (`agent.`/`shared_attn.` vs
/// `worldmodel.`).
pub fn merged_params(bundle: &AgentBundle, wm: &WorldModel) -> Result<ParamStore, TrainError> {
    let mut merged = ParamStore::new();
    for (name, tensor) in bundle.params.iter().chain(wm.params.iter()) {
        merged.insert(name, tensor.clone())?;
    }
    Ok(merged)
}

/// Split a merged checkpoint store back into agent and feedback-model parts.
pub fn split_params(merged: &ParamStore) -> (ParamStore, ParamStore) {
    let mut agents = ParamStore::new();
    let mut wm = ParamStore::new();
    for (name, tensor) in merged.iter() {
        let dest = if name.starts_with("worldmodel.") { &mut wm } else { &mut agents };
        dest.insert(name, tensor.clone()).expect("fresh store accepts every unique name");
    }
    (agents, wm)
}
