//! The ranking policy stack: one agent per feedback aspect, each with a
//! private state encoder and critic. Agents exchange information through a
//! shared multi-head attention step (or, as an ablation, a shared linear
//! layer over concatenated peer embeddings). Auxiliary agents emit their own
//! actions; the final agent — the watch-time agent — integrates everyone's
//! context and the auxiliary actions into the action that actually ranks.
//!
//! All forward passes build on [`ModelGraph`], so the same code path serves
//! evaluation and gradient computation.

use serde::{Deserialize, Serialize};

use crate::env::ASPECT_NAMES;
use crate::nn::{init_bias, init_weight, ModelGraph, NnError, ParamStore, Var};
use crate::rng::RngStream;

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("config: {0}")]
    Config(String),
    #[error("contract: {0}")]
    Contract(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// How agents see each other: attention is the full mechanism, concat is
/// the ablation that replaces it with a plain shared linear layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollabMode {
    Attention,
    Concat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    /// Number of agents; the last one owns the main (watch-time) objective.
    pub n_agents: usize,
    /// Width of the flattened environment state.
    pub state_dim: usize,
    /// Action width = item embedding width (scores are dot products).
    pub action_dim: usize,
    pub encoder_hidden: usize,
    /// Width of each agent's state embedding h.
    pub embed_dim: usize,
    /// Total width of the attention output (split across heads).
    pub attn_dim: usize,
    pub attn_heads: usize,
    /// Divide attention logits by sqrt(head width). Off by default: the
    /// collaboration rule is plain exp(k·q).
    pub scaled_attention: bool,
    pub actor_hidden: usize,
    pub critic_state_dim: usize,
    pub critic_hidden: usize,
    /// Action coordinates live in [-bound, bound] via tanh scaling.
    pub action_bound: f32,
    /// Critic output multiplier so O(1) weights can express large returns.
    pub critic_output_scale: f32,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            n_agents: crate::env::N_ASPECTS,
            state_dim: crate::env::EnvConfig::default().state_dim(),
            action_dim: 16,
            encoder_hidden: 64,
            embed_dim: 32,
            attn_dim: 32,
            attn_heads: 4,
            scaled_attention: false,
            actor_hidden: 64,
            critic_state_dim: 32,
            critic_hidden: 64,
            action_bound: 1.0,
            critic_output_scale: 50.0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: String| Err(AgentError::Config(m));
        if self.n_agents < 2 {
            return bad(format!("n_agents ({}) must be at least 2", self.n_agents));
        }
        if self.attn_heads == 0 || self.attn_dim % self.attn_heads != 0 {
            return bad(format!(
                "attn_heads ({}) must divide attn_dim ({})",
                self.attn_heads, self.attn_dim
            ));
        }
        for (name, v) in [
            ("state_dim", self.state_dim),
            ("action_dim", self.action_dim),
            ("encoder_hidden", self.encoder_hidden),
            ("embed_dim", self.embed_dim),
            ("actor_hidden", self.actor_hidden),
            ("critic_state_dim", self.critic_state_dim),
            ("critic_hidden", self.critic_hidden),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.action_bound > 0.0) {
            return bad(format!("action_bound ({}) must be positive", self.action_bound));
        }
        if !(self.critic_output_scale > 0.0) {
            return bad(format!(
                "critic_output_scale ({}) must be positive",
                self.critic_output_scale
            ));
        }
        Ok(())
    }

    /// Index of the main (watch-time) agent: always the last slot.
    pub fn main_index(&self) -> usize {
        self.n_agents - 1
    }

    pub fn aspect_name(&self, agent: usize) -> String {
        if agent == self.main_index() {
            ASPECT_NAMES[crate::env::WATCH_TIME].to_string()
        } else if self.n_agents == crate::env::N_ASPECTS {
            ASPECT_NAMES[agent].to_string()
        } else {
            format!("aux_{agent}")
        }
    }

    fn aux_actor_in(&self) -> usize {
        self.embed_dim + self.attn_dim
    }

    fn main_actor_in(&self) -> usize {
        self.embed_dim + self.n_agents * self.attn_dim + (self.n_agents - 1) * self.action_dim
    }
}

/// All policy parameters plus the slow-moving target copy used for
/// bootstrapped value targets. The attention projections exist once and are
/// referenced by every agent.
#[derive(Debug, Clone)]
pub struct AgentBundle {
    config: AgentConfig,
    pub params: ParamStore,
    pub target: ParamStore,
}

impl AgentBundle {
    pub fn new(config: AgentConfig, rng: &RngStream) -> Result<Self, AgentError> {
        config.validate()?;
        let mut params = ParamStore::new();
        let c = &config;
        for i in 0..c.n_agents {
            let p = format!("agent.{i}");
            init_weight(&mut params, &format!("{p}.encoder.l0.weight"), c.encoder_hidden, c.state_dim, rng)?;
            init_weight(&mut params, &format!("{p}.encoder.l1.weight"), c.embed_dim, c.encoder_hidden, rng)?;
            let actor_in = if i == c.main_index() { c.main_actor_in() } else { c.aux_actor_in() };
            init_weight(&mut params, &format!("{p}.actor.l0.weight"), c.actor_hidden, actor_in, rng)?;
            init_bias(&mut params, &format!("{p}.actor.l0.bias"), c.actor_hidden)?;
            init_weight(&mut params, &format!("{p}.actor.l1.weight"), c.action_dim, c.actor_hidden, rng)?;
            init_bias(&mut params, &format!("{p}.actor.l1.bias"), c.action_dim)?;
            init_weight(&mut params, &format!("{p}.critic.enc.weight"), c.critic_state_dim, c.state_dim, rng)?;
            init_bias(&mut params, &format!("{p}.critic.enc.bias"), c.critic_state_dim)?;
            init_weight(
                &mut params,
                &format!("{p}.critic.l0.weight"),
                c.critic_hidden,
                c.critic_state_dim + c.action_dim,
                rng,
            )?;
            init_bias(&mut params, &format!("{p}.critic.l0.bias"), c.critic_hidden)?;
            init_weight(&mut params, &format!("{p}.critic.l1.weight"), 1, c.critic_hidden, rng)?;
            init_bias(&mut params, &format!("{p}.critic.l1.bias"), 1)?;
        }
        for name in ["shared_attn.wq", "shared_attn.wk", "shared_attn.wv"] {
            init_weight(&mut params, name, c.attn_dim, c.embed_dim, rng)?;
        }
        init_weight(
            &mut params,
            "shared_attn.concat.weight",
            c.attn_dim,
            (c.n_agents - 1) * c.embed_dim,
            rng,
        )?;
        init_bias(&mut params, "shared_attn.concat.bias", c.attn_dim)?;
        let target = params.clone();
        Ok(AgentBundle { config, params, target })
    }

    /// Rebuild a bundle around externally loaded parameters (checkpoint
    /// path). Missing parameter names surface on first use.
    pub fn from_parts(
        config: AgentConfig,
        params: ParamStore,
        target: ParamStore,
    ) -> Result<Self, AgentError> {
        config.validate()?;
        Ok(AgentBundle { config, params, target })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    /// Deterministic joint forward pass on one state row; returns every
    /// agent's action (the last entry ranks items).
    pub fn act(&self, state: &[f32], mode: CollabMode) -> Result<Vec<Vec<f32>>, AgentError> {
        let mut mg = ModelGraph::new(&self.params);
        let s = mg.graph.input_row(state);
        let fwd = act_joint(&mut mg, &self.config, s, mode)?;
        Ok(fwd.actions.iter().map(|&a| mg.graph.value(a).to_vec()).collect())
    }

    /// Scalar critic value for one (state, action) pair.
    pub fn q_value(&self, agent: usize, state: &[f32], action: &[f32]) -> Result<f32, AgentError> {
        let mut mg = ModelGraph::new(&self.params);
        let s = mg.graph.input_row(state);
        let a = mg.graph.input_row(action);
        let q = critic_value(&mut mg, &self.config, agent, s, a)?;
        Ok(mg.graph.scalar_value(q))
    }
}

fn check_width(mg: &ModelGraph, what: &str, v: Var, want: usize) -> Result<(), AgentError> {
    let (_, cols) = mg.graph.shape(v);
    if cols != want {
        return Err(AgentError::Contract(format!("{what} has width {cols}, expected {want}")));
    }
    Ok(())
}

/// Agent `i`'s state embedding h: bias-free two-layer MLP, tanh output.
pub fn encode_state(
    mg: &mut ModelGraph,
    cfg: &AgentConfig,
    agent: usize,
    state: Var,
) -> Result<Var, AgentError> {
    check_width(mg, "state features", state, cfg.state_dim)?;
    let x = mg.linear_layer(state, &format!("agent.{agent}.encoder.l0"))?;
    let x = mg.graph.relu(x);
    let x = mg.linear_layer(x, &format!("agent.{agent}.encoder.l1"))?;
    Ok(mg.graph.tanh_(x))
}

/// Peer contexts for all agents.
pub struct Collab {
    /// Aggregated peer information e per agent, width `attn_dim`.
    pub e: Vec<Var>,
    /// Attention rows per agent and head, each `[batch, n_agents-1]` on the
    /// simplex; empty in concat mode.
    pub alpha: Vec<Vec<Var>>,
}

/// Exchange information between agents.
///
/// Attention mode: per head, agent i attends over every peer j ≠ i with
/// weights softmax_j(q_i · k_j) and aggregates relu-projected peer values;
/// query/key/value projections are the shared `shared_attn.*` parameters.
/// Concat mode: e_i is a shared linear layer over the concatenated peers.
pub fn collaborate(
    mg: &mut ModelGraph,
    cfg: &AgentConfig,
    h: &[Var],
    mode: CollabMode,
) -> Result<Collab, AgentError> {
    let n = h.len();
    if n < 2 {
        return Err(AgentError::Contract(format!("collaboration needs at least 2 agents, got {n}")));
    }
    if n != cfg.n_agents {
        return Err(AgentError::Contract(format!(
            "got {n} state embeddings for {} agents",
            cfg.n_agents
        )));
    }
    match mode {
        CollabMode::Concat => {
            let mut e = Vec::with_capacity(n);
            for i in 0..n {
                let peers: Vec<Var> = (0..n).filter(|&j| j != i).map(|j| h[j]).collect();
                let cat = mg.graph.concat_cols(&peers)?;
                e.push(mg.linear_layer(cat, "shared_attn.concat")?);
            }
            Ok(Collab { e, alpha: vec![Vec::new(); n] })
        }
        CollabMode::Attention => {
            let heads = cfg.attn_heads;
            let head_dim = cfg.attn_dim / heads;
            let wq = mg.param("shared_attn.wq")?;
            let wk = mg.param("shared_attn.wk")?;
            let wv = mg.param("shared_attn.wv")?;
            let mut keys = Vec::with_capacity(n);
            let mut vals = Vec::with_capacity(n);
            for &hj in h {
                keys.push(mg.graph.matmul_bt(hj, wk)?);
                let v = mg.graph.matmul_bt(hj, wv)?;
                vals.push(mg.graph.relu(v));
            }
            let mut e = Vec::with_capacity(n);
            let mut alpha = Vec::with_capacity(n);
            for i in 0..n {
                let q = mg.graph.matmul_bt(h[i], wq)?;
                let peers: Vec<usize> = (0..n).filter(|&j| j != i).collect();
                let mut head_ctx = Vec::with_capacity(heads);
                let mut head_alpha = Vec::with_capacity(heads);
                for hd in 0..heads {
                    let q_h = mg.graph.slice_cols(q, hd * head_dim, head_dim)?;
                    let mut scores = Vec::with_capacity(peers.len());
                    for &j in &peers {
                        let k_h = mg.graph.slice_cols(keys[j], hd * head_dim, head_dim)?;
                        let mut s = mg.graph.row_dot(q_h, k_h)?;
                        if cfg.scaled_attention {
                            s = mg.graph.affine(s, 1.0 / (head_dim as f32).sqrt(), 0.0);
                        }
                        scores.push(s);
                    }
                    let logits = mg.graph.concat_cols(&scores)?;
                    let a = mg.graph.softmax_rows(logits);
                    let mut ctx: Option<Var> = None;
                    for (slot, &j) in peers.iter().enumerate() {
                        let weight = mg.graph.slice_cols(a, slot, 1)?;
                        let v_h = mg.graph.slice_cols(vals[j], hd * head_dim, head_dim)?;
                        let term = mg.graph.mul_col(v_h, weight)?;
                        ctx = Some(match ctx {
                            None => term,
                            Some(acc) => mg.graph.add(acc, term)?,
                        });
                    }
                    head_ctx.push(ctx.expect("at least one peer"));
                    head_alpha.push(a);
                }
                e.push(mg.graph.concat_cols(&head_ctx)?);
                alpha.push(head_alpha);
            }
            Ok(Collab { e, alpha })
        }
    }
}

fn actor_mlp(
    mg: &mut ModelGraph,
    cfg: &AgentConfig,
    agent: usize,
    input: Var,
) -> Result<Var, AgentError> {
    let x = mg.linear_layer(input, &format!("agent.{agent}.actor.l0"))?;
    let x = mg.graph.relu(x);
    let x = mg.linear_layer(x, &format!("agent.{agent}.actor.l1"))?;
    let x = mg.graph.tanh_(x);
    Ok(mg.graph.affine(x, cfg.action_bound, 0.0))
}

/// Auxiliary agent k's action from its own embedding and peer context.
pub fn aux_action(
    mg: &mut ModelGraph,
    cfg: &AgentConfig,
    agent: usize,
    h: Var,
    e: Var,
) -> Result<Var, AgentError> {
    if agent == cfg.main_index() {
        return Err(AgentError::Contract(
            "the main agent integrates auxiliary actions; use main_action".into(),
        ));
    }
    let input = mg.graph.concat_cols(&[h, e])?;
    actor_mlp(mg, cfg, agent, input)
}

/// The main agent's action: integrates its own embedding, every agent's
/// peer context, and all auxiliary actions. Because the auxiliary actions
/// are graph nodes, gradients flow from here back into the auxiliary actors.
pub fn main_action(
    mg: &mut ModelGraph,
    cfg: &AgentConfig,
    h_main: Var,
    e_all: &[Var],
    aux_actions: &[Var],
) -> Result<Var, AgentError> {
    if e_all.len() != cfg.n_agents {
        return Err(AgentError::Contract(format!(
            "expected {} peer contexts, got {}",
            cfg.n_agents,
            e_all.len()
        )));
    }
    if aux_actions.len() != cfg.n_agents - 1 {
        return Err(AgentError::Contract(format!(
            "expected {} auxiliary actions, got {}",
            cfg.n_agents - 1,
            aux_actions.len()
        )));
    }
    let mut parts = vec![h_main];
    parts.extend_from_slice(e_all);
    parts.extend_from_slice(aux_actions);
    let input = mg.graph.concat_cols(&parts)?;
    actor_mlp(mg, cfg, cfg.main_index(), input)
}

/// Scalar value Q_i(s, a): private state encoder, then an MLP over the
/// encoded state joined with the action.
pub fn critic_value(
    mg: &mut ModelGraph,
    cfg: &AgentConfig,
    agent: usize,
    state: Var,
    action: Var,
) -> Result<Var, AgentError> {
    check_width(mg, "state features", state, cfg.state_dim)?;
    check_width(mg, "action", action, cfg.action_dim)?;
    let enc = mg.linear_layer(state, &format!("agent.{agent}.critic.enc"))?;
    let enc = mg.graph.relu(enc);
    let x = mg.graph.concat_cols(&[enc, action])?;
    let x = mg.linear_layer(x, &format!("agent.{agent}.critic.l0"))?;
    let x = mg.graph.relu(x);
    let x = mg.linear_layer(x, &format!("agent.{agent}.critic.l1"))?;
    Ok(mg.graph.affine(x, cfg.critic_output_scale, 0.0))
}

/// One full joint forward pass.
pub struct JointForward {
    pub h: Vec<Var>,
    pub e: Vec<Var>,
    pub alpha: Vec<Vec<Var>>,
    /// Per-agent actions; the last entry is the main agent's.
    pub actions: Vec<Var>,
}

pub fn act_joint(
    mg: &mut ModelGraph,
    cfg: &AgentConfig,
    state: Var,
    mode: CollabMode,
) -> Result<JointForward, AgentError> {
    let n = cfg.n_agents;
    let mut h = Vec::with_capacity(n);
    for i in 0..n {
        h.push(encode_state(mg, cfg, i, state)?);
    }
    let collab = collaborate(mg, cfg, &h, mode)?;
    let main = cfg.main_index();
    let mut actions = Vec::with_capacity(n);
    for k in 0..main {
        actions.push(aux_action(mg, cfg, k, h[k], collab.e[k])?);
    }
    let a_main = main_action(mg, cfg, h[main], &collab.e, &actions)?;
    actions.push(a_main);
    Ok(JointForward { h, e: collab.e, alpha: collab.alpha, actions })
}

/// Score a candidate matrix (`rows x action_dim`, row-major) against an
/// action: score_j = action · item_j, accumulated in f64.
pub fn score_items(action: &[f32], item_features: &[f32]) -> Result<Vec<f32>, AgentError> {
    let d = action.len();
    if d == 0 || item_features.len() % d != 0 {
        return Err(AgentError::Contract(format!(
            "item feature matrix of {} values is not a multiple of action width {d}",
            item_features.len()
        )));
    }
    Ok(item_features
        .chunks_exact(d)
        .map(|row| {
            row.iter().zip(action).map(|(&x, &a)| x as f64 * a as f64).sum::<f64>() as f32
        })
        .collect())
}
