//! Layered TOML configuration: one block per module, defaults for every
//! key, unknown keys rejected, validation errors that name the offending
//! dotted key, and one-flag ablation presets.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::agents::{AgentConfig, CollabMode};
use crate::env::EnvConfig;
use crate::evalkit::BcConfig;
use crate::rng::fnv1a;
use crate::training::{NonImpressionMode, TrainingConfig};
use crate::worldmodel::WmConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("TOML: {0}")]
    Parse(String),
    #[error("`{key}`: {message}")]
    Constraint { key: String, message: String },
}

fn constraint(key: &str, message: String) -> ConfigError {
    ConfigError::Constraint { key: key.into(), message }
}

/// Agent hyperparameters that are free to choose; the two input widths
/// (state and action) always follow from the environment block, so they
/// are not configuration keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentsBlock {
    pub n_agents: usize,
    pub encoder_hidden: usize,
    pub embed_dim: usize,
    pub attn_dim: usize,
    pub attn_heads: usize,
    pub scaled_attention: bool,
    pub actor_hidden: usize,
    pub critic_state_dim: usize,
    pub critic_hidden: usize,
    pub action_bound: f32,
    pub critic_output_scale: f32,
}

impl Default for AgentsBlock {
    fn default() -> Self {
        let a = AgentConfig::default();
        AgentsBlock {
            n_agents: a.n_agents,
            encoder_hidden: a.encoder_hidden,
            embed_dim: a.embed_dim,
            attn_dim: a.attn_dim,
            attn_heads: a.attn_heads,
            scaled_attention: a.scaled_attention,
            actor_hidden: a.actor_hidden,
            critic_state_dim: a.critic_state_dim,
            critic_hidden: a.critic_hidden,
            action_bound: a.action_bound,
            critic_output_scale: a.critic_output_scale,
        }
    }
}

/// Feedback-model hyperparameters; the input widths follow from the
/// environment and agents blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldModelBlock {
    pub proj_dim: usize,
    pub hidden_dim: usize,
    pub pred_hidden: usize,
    /// Dropout rate ρ on the stochastic predictor.
    pub dropout: f32,
    /// Uncertainty-multiplier coefficient λ.
    pub lambda: f64,
}

impl Default for WorldModelBlock {
    fn default() -> Self {
        let w = WmConfig::default();
        WorldModelBlock {
            proj_dim: w.proj_dim,
            hidden_dim: w.hidden_dim,
            pred_hidden: w.pred_hidden,
            dropout: w.dropout,
            lambda: w.lambda,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalBlock {
    /// Importance-weight cap c.
    pub cap: f64,
    /// Ranking-softmax temperature for target propensities.
    pub temperature: f64,
    /// Simulated sessions per online evaluation.
    pub episodes: usize,
    pub bc: BcConfig,
}

impl Default for EvalBlock {
    fn default() -> Self {
        EvalBlock { cap: 5.0, temperature: 1.0, episodes: 200, bc: BcConfig::default() }
    }
}

/// The full experiment configuration. An empty TOML file yields the
/// defaults; any present key overrides its default; unknown keys are
/// rejected by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub env: EnvConfig,
    pub agents: AgentsBlock,
    pub training: TrainingConfig,
    pub worldmodel: WorldModelBlock,
    pub eval: EvalBlock,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 42,
            env: EnvConfig::default(),
            agents: AgentsBlock::default(),
            training: TrainingConfig::default(),
            worldmodel: WorldModelBlock::default(),
            eval: EvalBlock::default(),
        }
    }
}

/// The framework and its three ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Full method: attentive collaboration + simulated non-impression rewards.
    Mmrf,
    /// Collaboration replaced by plain concatenation.
    MmrfCo,
    /// Non-impression samples dropped entirely.
    MmrfDa,
    /// Non-impression samples kept with a fixed negative reward.
    MmrfNs,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Mmrf, Preset::MmrfCo, Preset::MmrfDa, Preset::MmrfNs];

    pub fn name(&self) -> &'static str {
        match self {
            Preset::Mmrf => "mmrf",
            Preset::MmrfCo => "mmrf-co",
            Preset::MmrfDa => "mmrf-da",
            Preset::MmrfNs => "mmrf-ns",
        }
    }
}

impl FromStr for Preset {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mmrf" => Ok(Preset::Mmrf),
            "mmrf-co" => Ok(Preset::MmrfCo),
            "mmrf-da" => Ok(Preset::MmrfDa),
            "mmrf-ns" => Ok(Preset::MmrfNs),
            other => Err(constraint(
                "preset",
                format!("unknown preset `{other}`; expected mmrf|mmrf-co|mmrf-da|mmrf-ns"),
            )),
        }
    }
}

/// Reward used by the negative-constant ablation preset.
pub const NS_CONSTANT_REWARD: f64 = -1.0;

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let config: Config =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml_str(&text)
    }

    /// The effective configuration with every default made explicit;
    /// re-parsing this text reproduces `self` exactly.
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("a validated config serializes")
    }

    /// Short stable fingerprint for report metadata.
    pub fn hash(&self) -> String {
        format!("{:016x}", fnv1a(self.to_toml_string().as_bytes()))
    }

    /// Materialize the agent configuration, deriving the input widths from
    /// the environment block.
    pub fn agent_config(&self) -> AgentConfig {
        let a = &self.agents;
        AgentConfig {
            n_agents: a.n_agents,
            state_dim: self.env.state_dim(),
            action_dim: self.env.embed_dim,
            encoder_hidden: a.encoder_hidden,
            embed_dim: a.embed_dim,
            attn_dim: a.attn_dim,
            attn_heads: a.attn_heads,
            scaled_attention: a.scaled_attention,
            actor_hidden: a.actor_hidden,
            critic_state_dim: a.critic_state_dim,
            critic_hidden: a.critic_hidden,
            action_bound: a.action_bound,
            critic_output_scale: a.critic_output_scale,
        }
    }

    /// Materialize the feedback-model configuration; slate features hold
    /// the mean item embedding, the ranking action, and the mean duration.
    pub fn wm_config(&self) -> WmConfig {
        let w = &self.worldmodel;
        let mut config =
            WmConfig::for_dims(self.env.state_dim(), self.env.embed_dim, self.env.embed_dim);
        config.proj_dim = w.proj_dim;
        config.hidden_dim = w.hidden_dim;
        config.pred_hidden = w.pred_hidden;
        config.dropout = w.dropout;
        config.lambda = w.lambda;
        config
    }

    /// Switch the ablation toggles; every other key is left untouched, so
    /// explicit keys loaded from file still apply.
    pub fn apply_preset(&mut self, preset: Preset) {
        match preset {
            Preset::Mmrf => {
                self.training.collab = CollabMode::Attention;
                self.training.nonimpression = NonImpressionMode::Simulated;
            }
            Preset::MmrfCo => {
                self.training.collab = CollabMode::Concat;
                self.training.nonimpression = NonImpressionMode::Simulated;
            }
            Preset::MmrfDa => {
                self.training.collab = CollabMode::Attention;
                self.training.nonimpression = NonImpressionMode::Disabled;
            }
            Preset::MmrfNs => {
                self.training.collab = CollabMode::Attention;
                self.training.nonimpression = NonImpressionMode::Constant(NS_CONSTANT_REWARD);
            }
        }
    }

    /// Cross-field validation. The checks with spec-visible keys are
    /// restated here so the error names the dotted key; each block's own
    /// validation runs afterwards as the backstop.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.env.slate_size == 0 || self.env.slate_size > self.env.pool_size {
            return Err(constraint(
                "env.slate_size",
                format!(
                    "slate size ({}) must be in 1..=env.pool_size ({})",
                    self.env.slate_size, self.env.pool_size
                ),
            ));
        }
        if !(0.0..1.0).contains(&self.training.gamma) {
            return Err(constraint(
                "training.gamma",
                format!("gamma ({}) must be in [0, 1)", self.training.gamma),
            ));
        }
        if !(0.0..=1.0).contains(&self.training.nonimpression_rate) {
            return Err(constraint(
                "training.nonimpression_rate",
                format!(
                    "retention rate ({}) must be in [0, 1]",
                    self.training.nonimpression_rate
                ),
            ));
        }
        self.env.validate().map_err(|e| constraint("env", e.to_string()))?;
        self.agent_config().validate().map_err(|e| constraint("agents", e.to_string()))?;
        self.wm_config().validate().map_err(|e| constraint("worldmodel", e.to_string()))?;
        self.training.validate().map_err(|e| constraint("training", e.to_string()))?;
        if !(self.eval.cap > 0.0) {
            return Err(constraint(
                "eval.cap",
                format!("importance-weight cap ({}) must be positive", self.eval.cap),
            ));
        }
        if !(self.eval.temperature > 0.0) {
            return Err(constraint(
                "eval.temperature",
                format!("temperature ({}) must be positive", self.eval.temperature),
            ));
        }
        if self.eval.episodes == 0 {
            return Err(constraint("eval.episodes", "must be at least 1".into()));
        }
        if !(self.eval.bc.lr > 0.0) {
            return Err(constraint(
                "eval.bc.lr",
                format!("learning rate ({}) must be positive", self.eval.bc.lr),
            ));
        }
        if self.eval.bc.epochs == 0 {
            return Err(constraint("eval.bc.epochs", "must be at least 1".into()));
        }
        if self.eval.bc.l2 < 0.0 {
            return Err(constraint(
                "eval.bc.l2",
                format!("l2 penalty ({}) must be nonnegative", self.eval.bc.l2),
            ));
        }
        Ok(())
    }
}
