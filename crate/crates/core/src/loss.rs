//! Softmax and cross-entropy on raw logits, with gradients.

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    softmax_t(logits, 1.0)
}

/// Temperature-softened softmax.
pub fn softmax_t(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| ((z - max) / temperature).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

pub fn log_softmax_t(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|z| ((z - max) / temperature).exp()).sum::<f64>().ln();
    logits.iter().map(|z| (z - max) / temperature - lse).collect()
}

/// `-log softmax(logits)[target]` and its gradient with respect to the logits.
pub fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let logp = log_softmax_t(logits, 1.0);
    let mut grad: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    grad[target] -= 1.0;
    (-logp[target], grad)
}

/// Cross-entropy `-sum_c q_c log softmax(z / T)_c` against a fixed soft target
/// `q`, and its gradient with respect to `z`: `(softmax(z / T) - q) / T`.
pub fn soft_cross_entropy(logits: &[f64], soft_target: &[f64], temperature: f64) -> (f64, Vec<f64>) {
    let logp = log_softmax_t(logits, temperature);
    let loss = -soft_target.iter().zip(&logp).map(|(q, l)| q * l).sum::<f64>();
    let grad = logp
        .iter()
        .zip(soft_target)
        .map(|(l, q)| (l.exp() - q) / temperature)
        .collect();
    (loss, grad)
}
