//! Log-domain arithmetic shared by policies, losses and oracles.

/// `log sum_i exp(x_i)`; `-inf` for an empty slice or all `-inf` entries.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if m == f64::INFINITY {
        return f64::INFINITY;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Writes `log softmax(logits)` into `out`.
///
/// Computed as `(x_i - max) - log sum exp(x_j - max)` so that equal logits give
/// exactly `-log n` regardless of their common value.
pub fn log_softmax_into(logits: &[f64], out: &mut Vec<f64>) {
    out.clear();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
    out.extend(logits.iter().map(|&x| (x - m) - lse));
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    log_softmax_into(logits, &mut out);
    out
}

/// Adds `coef * d log softmax(logits)[slot] / d logits` into `grad`.
pub fn add_log_softmax_grad(log_probs: &[f64], slot: usize, coef: f64, grad: &mut [f64]) {
    for (i, (g, lp)) in grad.iter_mut().zip(log_probs).enumerate() {
        let onehot = if i == slot { 1.0 } else { 0.0 };
        *g += coef * (onehot - lp.exp());
    }
}
