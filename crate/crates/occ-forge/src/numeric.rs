//! Small deterministic numeric helpers shared across modules.

/// Pairwise (fixed-tree) summation.
///
/// Deterministic for a given slice regardless of thread count, and more
/// accurate than naive left-to-right accumulation on long inputs.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        let mut acc = 0.0;
        for v in values {
            acc += v;
        }
        return acc;
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Numerically stabilized softmax (max subtraction). Empty input yields empty output.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    if logits.is_empty() {
        return Vec::new();
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let norm: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / norm).collect()
}

/// log(sum(exp(logits))) with max subtraction.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    let sum: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_naive_on_small() {
        let xs: Vec<f64> = (0..100).map(|i| (i as f64) * 0.25 - 7.0).collect();
        let naive: f64 = xs.iter().sum();
        assert!((pairwise_sum(&xs) - naive).abs() < 1e-9);
    }

    #[test]
    fn softmax_normalizes() {
        let w = softmax(&[1.0, 2.0, 3.0]);
        let total: f64 = w.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(w[2] > w[1] && w[1] > w[0]);
    }

    #[test]
    fn softmax_shift_invariant() {
        let a = softmax(&[0.1, -0.4, 2.0]);
        let b = softmax(&[100.1, 99.6, 102.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn log_sum_exp_uniform() {
        let v = log_sum_exp(&[0.0; 4]);
        assert!((v - (4.0f64).ln()).abs() < 1e-12);
    }
}
