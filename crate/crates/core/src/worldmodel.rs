//! The user-feedback simulator: a recurrent model that tracks a session and
//! predicts the seven normalized feedback aspects for any candidate slate.
//!
//! Two parallel predictor stacks read the same recurrent state. Predictor A
//! is deterministic; predictor B keeps dropout active even at inference, so
//! the pair disagrees more where the model is uncertain. A simulated reward
//! is the mean of the two predictions inflated by `exp(λ·KL)` between them —
//! uncertain slates get an exploration bonus. The model trains only on real
//! impressions (every training step carries a provenance flag).

use crate::env::{FeedbackVector, HATE, N_ASPECTS, WATCH_TIME};
use crate::nn::{
    adam_step, dropout, gru_step, init_bias, init_weight, AdamParams, AdamState, GruVars,
    ModelGraph, NnError, ParamStore, Var,
};
use crate::rng::{fnv1a, RngStream};

/// Clamp applied to both prediction distributions before logarithms.
pub const KL_EPSILON: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum WmError {
    #[error("config: {0}")]
    Config(String),
    #[error("contract: {0}")]
    Contract(String),
    #[error("the feedback model has not been trained yet; simulation needs at least one epoch")]
    Untrained,
    #[error("target {0} is outside [0, 1]")]
    Target(f32),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WmConfig {
    /// Width of the flattened environment state.
    pub state_dim: usize,
    /// Width of the slate features (mean item embedding, action, duration).
    pub slate_dim: usize,
    /// Width of the projected recurrent input.
    pub proj_dim: usize,
    /// Recurrent state width.
    pub hidden_dim: usize,
    /// Hidden width of each predictor stack.
    pub pred_hidden: usize,
    /// Dropout rate on predictor B's hidden layer.
    pub dropout: f32,
    /// KL scaling coefficient in the uncertainty multiplier.
    pub lambda: f64,
}

impl Default for WmConfig {
    fn default() -> Self {
        let env = crate::env::EnvConfig::default();
        WmConfig::for_dims(env.state_dim(), env.embed_dim, 16)
    }
}

impl WmConfig {
    /// Sizes the model for the given state, item-embedding, and action
    /// widths (slate features are mean embedding ‖ action ‖ mean duration).
    pub fn for_dims(state_dim: usize, embed_dim: usize, action_dim: usize) -> Self {
        WmConfig {
            state_dim,
            slate_dim: embed_dim + action_dim + 1,
            proj_dim: 32,
            hidden_dim: 32,
            pred_hidden: 32,
            dropout: 0.2,
            lambda: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), WmError> {
        for (name, v) in [
            ("state_dim", self.state_dim),
            ("slate_dim", self.slate_dim),
            ("proj_dim", self.proj_dim),
            ("hidden_dim", self.hidden_dim),
            ("pred_hidden", self.pred_hidden),
        ] {
            if v == 0 {
                return Err(WmError::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(WmError::Config(format!("dropout ({}) must be in [0, 1)", self.dropout)));
        }
        if self.lambda < 0.0 {
            return Err(WmError::Config(format!("lambda ({}) must be nonnegative", self.lambda)));
        }
        Ok(())
    }
}

/// One training step: what the model saw and what the user actually did.
/// `impression` guards provenance — only really-shown slates may train M.
#[derive(Debug, Clone)]
pub struct WmStep {
    pub state: Vec<f32>,
    pub slate: Vec<f32>,
    /// Normalized per-aspect feedback in [0, 1].
    pub targets: [f32; N_ASPECTS],
    pub impression: bool,
}

/// A session's consecutive steps, replayed through the recurrent state.
#[derive(Debug, Clone, Default)]
pub struct WmSequence {
    pub steps: Vec<WmStep>,
}

#[derive(Debug, Clone)]
pub struct WorldModel {
    config: WmConfig,
    pub params: ParamStore,
    dropout_base: RngStream,
    trained_epochs: u64,
}

impl WorldModel {
    pub fn new(config: WmConfig, rng: &RngStream) -> Result<Self, WmError> {
        config.validate()?;
        let c = &config;
        let in_dim = c.state_dim + c.slate_dim;
        let mut params = ParamStore::new();
        init_weight(&mut params, "worldmodel.inproj.weight", c.proj_dim, in_dim, rng)?;
        init_bias(&mut params, "worldmodel.inproj.bias", c.proj_dim)?;
        for gate in ["r", "z", "n"] {
            init_weight(&mut params, &format!("worldmodel.gru.w{gate}"), c.hidden_dim, c.proj_dim, rng)?;
            init_weight(&mut params, &format!("worldmodel.gru.u{gate}"), c.hidden_dim, c.hidden_dim, rng)?;
            init_bias(&mut params, &format!("worldmodel.gru.b{gate}"), c.hidden_dim)?;
        }
        for stack in ["pred_a", "pred_b"] {
            init_weight(&mut params, &format!("worldmodel.{stack}.l0.weight"), c.pred_hidden, c.hidden_dim, rng)?;
            init_bias(&mut params, &format!("worldmodel.{stack}.l0.bias"), c.pred_hidden)?;
            init_weight(&mut params, &format!("worldmodel.{stack}.heads.weight"), N_ASPECTS, c.pred_hidden, rng)?;
            init_bias(&mut params, &format!("worldmodel.{stack}.heads.bias"), N_ASPECTS)?;
        }
        Ok(WorldModel {
            config,
            params,
            dropout_base: rng.split_str("worldmodel.dropout"),
            trained_epochs: 0,
        })
    }

    pub fn config(&self) -> &WmConfig {
        &self.config
    }

    pub fn trained_epochs(&self) -> u64 {
        self.trained_epochs
    }

    /// Restore a model around externally loaded parameters (checkpoint path).
    pub fn from_parts(
        config: WmConfig,
        params: ParamStore,
        rng: &RngStream,
        trained_epochs: u64,
    ) -> Result<Self, WmError> {
        config.validate()?;
        Ok(WorldModel {
            config,
            params,
            dropout_base: rng.split_str("worldmodel.dropout"),
            trained_epochs,
        })
    }

    /// Fresh per-session recurrent state.
    pub fn initial_hidden(&self) -> Vec<f32> {
        vec![0.0; self.config.hidden_dim]
    }

    /// Predictor B's dropout stream for one call: a pure function of the
    /// model's base stream and the call inputs, so identical calls always
    /// draw identical masks and no caller-side rng threading is needed.
    fn call_stream(&self, hidden: &[f32], input: &[f32]) -> RngStream {
        let mut bytes = Vec::with_capacity((hidden.len() + input.len()) * 4);
        for &x in hidden.iter().chain(input) {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        self.dropout_base.split(fnv1a(&bytes))
    }

    fn gru_vars(&self, mg: &mut ModelGraph) -> Result<GruVars, NnError> {
        Ok(GruVars {
            wr: mg.param("worldmodel.gru.wr")?,
            ur: mg.param("worldmodel.gru.ur")?,
            br: mg.param("worldmodel.gru.br")?,
            wz: mg.param("worldmodel.gru.wz")?,
            uz: mg.param("worldmodel.gru.uz")?,
            bz: mg.param("worldmodel.gru.bz")?,
            wn: mg.param("worldmodel.gru.wn")?,
            un: mg.param("worldmodel.gru.un")?,
            bn: mg.param("worldmodel.gru.bn")?,
        })
    }

    /// One recurrent step inside an existing graph. Returns the two
    /// prediction rows (each `[rows, 7]`, sigmoid outputs) and the advanced
    /// hidden state.
    fn forward_step(
        &self,
        mg: &mut ModelGraph,
        input: Var,
        hidden: Var,
    ) -> Result<(Var, Var, Var), WmError> {
        let mut drop_rng =
            self.call_stream(mg.graph.value(hidden), mg.graph.value(input));
        let x = mg.linear_layer(input, "worldmodel.inproj")?;
        let x = mg.graph.relu(x);
        let gru = self.gru_vars(mg)?;
        let h_new = gru_step(&mut mg.graph, &gru, hidden, x)?;

        let a = mg.linear_layer(h_new, "worldmodel.pred_a.l0")?;
        let a = mg.graph.relu(a);
        let a = mg.linear_layer(a, "worldmodel.pred_a.heads")?;
        let pred_a = mg.graph.sigmoid(a);

        let b = mg.linear_layer(h_new, "worldmodel.pred_b.l0")?;
        let b = mg.graph.relu(b);
        let b = dropout(&mut mg.graph, b, self.config.dropout, true, &mut drop_rng)?;
        let b = mg.linear_layer(b, "worldmodel.pred_b.heads")?;
        let pred_b = mg.graph.sigmoid(b);
        Ok((pred_a, pred_b, h_new))
    }

    fn check_dims(&self, hidden: &[f32], state: &[f32], slate: &[f32]) -> Result<(), WmError> {
        let c = &self.config;
        for (name, got, want) in [
            ("hidden", hidden.len(), c.hidden_dim),
            ("state", state.len(), c.state_dim),
            ("slate", slate.len(), c.slate_dim),
        ] {
            if got != want {
                return Err(WmError::Contract(format!("{name} has width {got}, expected {want}")));
            }
        }
        Ok(())
    }

    /// Advance the session tracker one request and predict all aspects.
    pub fn observe(
        &self,
        hidden: &[f32],
        state: &[f32],
        slate: &[f32],
    ) -> Result<(Vec<f32>, Vec<f32>, Vec<f32>), WmError> {
        self.check_dims(hidden, state, slate)?;
        let mut mg = ModelGraph::new(&self.params);
        let joined: Vec<f32> = state.iter().chain(slate).copied().collect();
        let x = mg.graph.input_row(&joined);
        let h = mg.graph.input_row(hidden);
        let (pred_a, pred_b, h_new) = self.forward_step(&mut mg, x, h)?;
        Ok((
            mg.graph.value(pred_a).to_vec(),
            mg.graph.value(pred_b).to_vec(),
            mg.graph.value(h_new).to_vec(),
        ))
    }

    /// Simulated per-aspect rewards for a hypothetical slate: the siamese
    /// mean times the uncertainty bonus per aspect. Watch time is
    /// denormalized by the slate's mean duration; hate is negated to match
    /// the environment's reward convention.
    pub fn simulate_all(
        &self,
        hidden: &[f32],
        state: &[f32],
        slate: &[f32],
        lambda: f64,
        mean_duration: f32,
    ) -> Result<[f64; N_ASPECTS], WmError> {
        if self.trained_epochs == 0 {
            return Err(WmError::Untrained);
        }
        let (pred_a, pred_b, _) = self.observe(hidden, state, slate)?;
        let mut out = [0.0; N_ASPECTS];
        for aspect in 0..N_ASPECTS {
            let a = pred_a[aspect] as f64;
            let b = pred_b[aspect] as f64;
            let mut r = 0.5 * (a + b) * uncertainty_multiplier(a, b, lambda);
            if aspect == WATCH_TIME {
                r *= mean_duration as f64;
            }
            if aspect == HATE {
                r = -r;
            }
            out[aspect] = r;
        }
        Ok(out)
    }

    /// Single-aspect view of [`WorldModel::simulate_all`].
    pub fn simulate_reward(
        &self,
        hidden: &[f32],
        state: &[f32],
        slate: &[f32],
        aspect: usize,
        lambda: f64,
        mean_duration: f32,
    ) -> Result<f64, WmError> {
        if aspect >= N_ASPECTS {
            return Err(WmError::Contract(format!("aspect index {aspect} out of range")));
        }
        Ok(self.simulate_all(hidden, state, slate, lambda, mean_duration)?[aspect])
    }

    /// One optimizer step on the siamese MSE over real impression
    /// sequences, with backpropagation through the recurrent state across
    /// each session window. Returns the mean per-step loss.
    pub fn update(
        &mut self,
        sequences: &[WmSequence],
        lr: f64,
        opt: &mut AdamState,
    ) -> Result<f64, WmError> {
        let n_steps: usize = sequences.iter().map(|s| s.steps.len()).sum();
        if n_steps == 0 {
            return Err(WmError::Contract("empty training batch".into()));
        }
        for seq in sequences {
            for step in &seq.steps {
                if !step.impression {
                    return Err(WmError::Contract(
                        "simulated (non-impression) data must never train the feedback model"
                            .into(),
                    ));
                }
                for &t in &step.targets {
                    if !(0.0..=1.0).contains(&t) {
                        return Err(WmError::Target(t));
                    }
                }
            }
        }

        let mut mg = ModelGraph::new(&self.params);
        let zero_h = vec![0.0; self.config.hidden_dim];
        let mut total: Option<Var> = None;
        for seq in sequences {
            let mut h = mg.graph.input_row(&zero_h);
            for step in &seq.steps {
                self.check_dims(&zero_h, &step.state, &step.slate)?;
                let joined: Vec<f32> =
                    step.state.iter().chain(&step.slate).copied().collect();
                let x = mg.graph.input_row(&joined);
                let (pred_a, pred_b, h_new) = self.forward_step(&mut mg, x, h)?;
                let target = mg.graph.input_row(&step.targets);
                let mut step_loss: Option<Var> = None;
                for pred in [pred_a, pred_b] {
                    let diff = mg.graph.sub(pred, target)?;
                    let sq = mg.graph.mul(diff, diff)?;
                    let mse = mg.graph.mean(sq);
                    step_loss = Some(match step_loss {
                        None => mse,
                        Some(acc) => mg.graph.add(acc, mse)?,
                    });
                }
                let step_loss = step_loss.expect("two predictors");
                total = Some(match total {
                    None => step_loss,
                    Some(acc) => mg.graph.add(acc, step_loss)?,
                });
                h = h_new;
            }
        }
        let loss = mg.graph.affine(total.expect("nonempty batch"), 1.0 / n_steps as f32, 0.0);
        let loss_value = mg.graph.scalar_value(loss) as f64;
        let grads = mg.graph.backward(loss)?;
        adam_step(&mut self.params, &grads, opt, lr, AdamParams::default())?;
        self.trained_epochs += 1;
        Ok(loss_value)
    }

    #[cfg(test)]
    pub(crate) fn force_trained(&mut self) {
        self.trained_epochs = 1;
    }
}

/// `exp(λ · KL(P‖P′))` with `P = (r_a, 1−r_a)`, `P′ = (r_b, 1−r_b)`, both
/// clamped to `[ε, 1−ε]`. Always ≥ 1: disagreement inflates, never deflates.
pub fn uncertainty_multiplier(r_a: f64, r_b: f64, lambda: f64) -> f64 {
    let a = r_a.clamp(KL_EPSILON, 1.0 - KL_EPSILON);
    let b = r_b.clamp(KL_EPSILON, 1.0 - KL_EPSILON);
    let kl = a * (a / b).ln() + (1.0 - a) * ((1.0 - a) / (1.0 - b)).ln();
    (lambda * kl.max(0.0)).exp()
}

/// Mean squared error of one predictor's heads against the targets.
pub fn predictor_mse(pred: &[f32], targets: &[f32]) -> f64 {
    assert_eq!(pred.len(), targets.len(), "head/target count mismatch");
    let n = pred.len() as f64;
    pred.iter()
        .zip(targets)
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            d * d
        })
        .sum::<f64>()
        / n
}

/// The siamese training loss for one step: both predictors' MSE summed.
pub fn wm_loss(pred_a: &[f32], pred_b: &[f32], targets: &[f32]) -> Result<f64, WmError> {
    for &t in targets {
        if !(0.0..=1.0).contains(&t) {
            return Err(WmError::Target(t));
        }
    }
    Ok(predictor_mse(pred_a, targets) + predictor_mse(pred_b, targets))
}

/// Per-aspect feedback means over a slate, all normalized to [0, 1]
/// (watch time enters as the watch *ratio*).
pub fn normalized_targets(feedback: &[FeedbackVector]) -> [f32; N_ASPECTS] {
    let k = feedback.len().max(1) as f64;
    let mut out = [0.0f64; N_ASPECTS];
    for fb in feedback {
        out[crate::env::CLICK] += fb.click as f64;
        out[crate::env::LIKE] += fb.like as f64;
        out[crate::env::FOLLOW] += fb.follow as f64;
        out[crate::env::COMMENT] += fb.comment as f64;
        out[HATE] += fb.hate as f64;
        out[crate::env::LONG_VIEW] += fb.long_view as f64;
        out[WATCH_TIME] += fb.watch_ratio as f64;
    }
    let mut norm = [0.0f32; N_ASPECTS];
    for (n, &sum) in norm.iter_mut().zip(&out) {
        *n = (sum / k) as f32;
    }
    norm
}

/// Slate features for the model: mean item embedding, the acting policy's
/// action vector, and the slate's mean duration normalized by `duration_cap`.
pub fn compose_slate(
    mean_embedding: &[f32],
    action: &[f32],
    mean_duration: f32,
    duration_cap: f32,
) -> Vec<f32> {
    let mut out = Vec::with_capacity(mean_embedding.len() + action.len() + 1);
    out.extend_from_slice(mean_embedding);
    out.extend_from_slice(action);
    out.push(mean_duration / duration_cap);
    out
}

/// Column-wise mean of row-major `rows x dim` embeddings.
pub fn mean_embedding(embeddings: &[f32], dim: usize) -> Vec<f32> {
    assert!(dim > 0 && embeddings.len() % dim == 0, "ragged embedding matrix");
    let rows = (embeddings.len() / dim).max(1);
    let mut mean = vec![0.0f64; dim];
    for row in embeddings.chunks_exact(dim) {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x as f64;
        }
    }
    mean.iter().map(|&m| (m / rows as f64) as f32).collect()
}
