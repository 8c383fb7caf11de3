//! Differentiable building blocks composed from graph primitives.

use super::graph::{Graph, Var};
use super::NnError;
use crate::rng::RngStream;

/// Affine map `x · Wᵀ (+ bias)`. `x` is `[m, in]`, `weight` is `[out, in]`,
/// `bias` (optional) is `[1, out]`.
pub fn linear(g: &mut Graph, x: Var, weight: Var, bias: Option<Var>) -> Result<Var, NnError> {
    let y = g.matmul_bt(x, weight)?;
    match bias {
        Some(b) => g.add_row(y, b),
        None => Ok(y),
    }
}

/// Shared attention projections. Weights are `[proj, d_model]`.
#[derive(Clone, Copy)]
pub struct AttnVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

/// Multi-head attention of `query` rows over `keys`/`values` rows.
///
/// Per head: weights softmax over `exp((W_k k_j) · (W_q q))`, context is the
/// weight-averaged `relu(W_v v_j)`. Heads are concatenated. `scaled` divides
/// scores by sqrt(head dim); the collaborating agents leave it off and use
/// raw bilinear scores.
///
/// Returns the context `[m, proj]` and one `[m, n]` weight matrix per head.
pub fn multihead_attention(
    g: &mut Graph,
    query: Var,
    keys: Var,
    values: Var,
    heads: usize,
    p: &AttnVars,
    scaled: bool,
) -> Result<(Var, Vec<Var>), NnError> {
    let proj = g.shape(p.wq).0;
    if heads == 0 || proj % heads != 0 {
        return Err(NnError::BadHeads { heads, dim: proj });
    }
    let hd = proj / heads;

    let q = g.matmul_bt(query, p.wq)?; // [m, proj]
    let k = g.matmul_bt(keys, p.wk)?; // [n, proj]
    let v = g.matmul_bt(values, p.wv)?; // [n, proj]
    let v = g.relu(v);

    let mut contexts = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * hd, hd)?;
        let kh = g.slice_cols(k, h * hd, hd)?;
        let vh = g.slice_cols(v, h * hd, hd)?;
        let mut scores = g.matmul_bt(qh, kh)?; // [m, n]
        if scaled {
            let inv = 1.0 / (hd as f32).sqrt();
            scores = g.affine(scores, inv, 0.0);
        }
        let alpha = g.softmax_rows(scores);
        let ctx = g.matmul(alpha, vh)?; // [m, hd]
        contexts.push(ctx);
        weights.push(alpha);
    }
    let context = g.concat_cols(&contexts)?;
    Ok((context, weights))
}

/// Gate parameters of a recurrent cell. `w*` act on the input (`[H, I]`),
/// `u*` on the hidden state (`[H, H]`), biases are `[1, H]`.
#[derive(Clone, Copy)]
pub struct GruVars {
    pub wr: Var,
    pub ur: Var,
    pub br: Var,
    pub wz: Var,
    pub uz: Var,
    pub bz: Var,
    pub wn: Var,
    pub un: Var,
    pub bn: Var,
}

/// One gated-recurrent-unit step.
///
/// ```text
/// r  = sigmoid(x·Wrᵀ + h·Urᵀ + br)        reset gate
/// z  = sigmoid(x·Wzᵀ + h·Uzᵀ + bz)        update gate
/// ñ  = tanh(x·Wnᵀ + (r⊙h)·Unᵀ + bn)       candidate state
/// h' = z⊙ñ + (1−z)⊙h
/// ```
///
/// Saturating the update gate (`z → 1`) hands the state to the candidate;
/// outputs stay in (-1, 1) because `h'` is a convex mix of `tanh` outputs.
pub fn gru_step(g: &mut Graph, p: &GruVars, hidden: Var, input: Var) -> Result<Var, NnError> {
    let xr = linear(g, input, p.wr, None)?;
    let hr = linear(g, hidden, p.ur, None)?;
    let rsum = g.add(xr, hr)?;
    let rsum = g.add_row(rsum, p.br)?;
    let r = g.sigmoid(rsum);

    let xz = linear(g, input, p.wz, None)?;
    let hz = linear(g, hidden, p.uz, None)?;
    let zsum = g.add(xz, hz)?;
    let zsum = g.add_row(zsum, p.bz)?;
    let z = g.sigmoid(zsum);

    let rh = g.mul(r, hidden)?;
    let xn = linear(g, input, p.wn, None)?;
    let hn = linear(g, rh, p.un, None)?;
    let nsum = g.add(xn, hn)?;
    let nsum = g.add_row(nsum, p.bn)?;
    let n = g.tanh_(nsum);

    let zn = g.mul(z, n)?;
    let one_minus_z = g.affine(z, -1.0, 1.0);
    let zh = g.mul(one_minus_z, hidden)?;
    g.add(zn, zh)
}

/// Inverted dropout. In training mode each entry is kept with probability
/// `1 - rate` and scaled by `1/(1 - rate)`; the mask comes from `rng`, so a
/// given stream always reproduces the same mask. Outside training, or at
/// rate 0, the input passes through unchanged.
pub fn dropout(
    g: &mut Graph,
    x: Var,
    rate: f32,
    train: bool,
    rng: &mut RngStream,
) -> Result<Var, NnError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(NnError::BadDropoutRate(rate));
    }
    if !train || rate == 0.0 {
        return Ok(x);
    }
    let (m, n) = g.shape(x);
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let mask: Vec<f32> = (0..m * n)
        .map(|_| if rng.f64() < keep as f64 { scale } else { 0.0 })
        .collect();
    g.dropout_mask(x, mask)
}
