//! Slate selection and selection probabilities shared by the simulator and
//! the offline estimators.

/// Indices of the top `k` scores, ranked by descending score with ties
/// broken by ascending index. Scores must be finite (callers validate).
pub fn top_k_indices(scores: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Sequential top-k selection probabilities under a Plackett-Luce model.
///
/// `chosen[r]` is the index (into `scores`) picked at rank `r`. The result's
/// `r`-th entry is the probability of that pick given the earlier picks:
/// `exp(s/τ)` over the sum of `exp(·/τ)` across not-yet-chosen candidates.
/// Computed in f64 with max subtraction, so every value lands in (0, 1].
pub fn plackett_luce_conditionals(scores: &[f32], chosen: &[usize], temperature: f64) -> Vec<f64> {
    assert!(temperature > 0.0, "temperature must be positive");
    let logits: Vec<f64> = scores.iter().map(|&s| s as f64 / temperature).collect();
    let mut taken = vec![false; scores.len()];
    let mut out = Vec::with_capacity(chosen.len());
    for &pick in chosen {
        let max = logits
            .iter()
            .enumerate()
            .filter(|(i, _)| !taken[*i])
            .map(|(_, &l)| l)
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = logits
            .iter()
            .enumerate()
            .filter(|(i, _)| !taken[*i])
            .map(|(_, &l)| (l - max).exp())
            .sum();
        out.push((logits[pick] - max).exp() / denom);
        taken[pick] = true;
    }
    out
}

/// Log of the full slate probability: sum of log conditionals.
pub fn plackett_luce_log_prob(scores: &[f32], chosen: &[usize], temperature: f64) -> f64 {
    plackett_luce_conditionals(scores, chosen, temperature)
        .iter()
        .map(|p| p.ln())
        .sum()
}
