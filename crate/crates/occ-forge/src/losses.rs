//! Training-loss kernels with analytic gradients: cross-entropy, masked
//! cross-entropy, Lovász-softmax, and the weighted total-loss aggregator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::log_sum_exp;

/// Weights balancing the five loss components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_depth: f64,
    pub lambda_seg: f64,
    pub lambda_pts: f64,
    pub lambda_mask_occ: f64,
    pub lambda_kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_depth: 0.05,
            lambda_seg: 0.5,
            lambda_pts: 1.0,
            lambda_mask_occ: 1.0,
            lambda_kl: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (v, name) in [
            (self.lambda_depth, "lambda_depth"),
            (self.lambda_seg, "lambda_seg"),
            (self.lambda_pts, "lambda_pts"),
            (self.lambda_mask_occ, "lambda_mask_occ"),
            (self.lambda_kl, "lambda_kl"),
        ] {
            if v < 0.0 {
                return Err(Error::config(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// Named loss component values entering the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub depth: f64,
    pub seg: f64,
    pub pts: f64,
    pub mask_occ: f64,
    pub distill: f64,
}

/// Mean negative log-softmax of the target class over a batch.
///
/// `logits` is row-major with `classes` entries per sample. Returns the loss
/// and its gradient with respect to the logits (same layout).
pub fn cross_entropy(
    logits: &[f64],
    classes: usize,
    targets: &[u16],
) -> Result<(f64, Vec<f64>)> {
    if classes < 2 {
        return Err(Error::config("cross entropy needs at least 2 classes"));
    }
    if logits.len() != targets.len() * classes {
        return Err(Error::dim("logit batch does not match target count"));
    }
    let n = targets.len();
    if n == 0 {
        return Ok((0.0, Vec::new()));
    }
    let mut grad = vec![0.0; logits.len()];
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t as usize >= classes {
            return Err(Error::data(format!("target {t} out of range 0..{classes}")));
        }
        let row = &logits[i * classes..(i + 1) * classes];
        let lse = log_sum_exp(row);
        total += lse - row[t as usize];
        for (k, &l) in row.iter().enumerate() {
            let softmax = (l - lse).exp();
            grad[i * classes + k] =
                (softmax - if k == t as usize { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((total / n as f64, grad))
}

/// Cross-entropy averaged over mask=1 samples only; a zero mask gives loss 0
/// with a zero gradient.
pub fn masked_cross_entropy(
    logits: &[f64],
    classes: usize,
    targets: &[u16],
    mask: &[bool],
) -> Result<(f64, Vec<f64>)> {
    if mask.len() != targets.len() {
        return Err(Error::dim("mask length does not match targets"));
    }
    if logits.len() != targets.len() * classes {
        return Err(Error::dim("logit batch does not match target count"));
    }
    let kept: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect();
    let mut grad = vec![0.0; logits.len()];
    if kept.is_empty() {
        return Ok((0.0, grad));
    }
    let sub_logits: Vec<f64> = kept
        .iter()
        .flat_map(|&i| logits[i * classes..(i + 1) * classes].iter().copied())
        .collect();
    let sub_targets: Vec<u16> = kept.iter().map(|&i| targets[i]).collect();
    let (loss, sub_grad) = cross_entropy(&sub_logits, classes, &sub_targets)?;
    for (slot, &i) in kept.iter().enumerate() {
        grad[i * classes..(i + 1) * classes]
            .copy_from_slice(&sub_grad[slot * classes..(slot + 1) * classes]);
    }
    Ok((loss, grad))
}

/// Increments of the Jaccard loss along the sorted ground-truth indicator.
fn lovasz_grad(fg_sorted: &[f64]) -> Vec<f64> {
    let gts: f64 = fg_sorted.iter().sum();
    let mut intersection = gts;
    let mut union = gts;
    let mut jaccard = Vec::with_capacity(fg_sorted.len());
    for &fg in fg_sorted {
        intersection -= fg;
        union += 1.0 - fg;
        jaccard.push(1.0 - intersection / union);
    }
    for r in (1..jaccard.len()).rev() {
        jaccard[r] -= jaccard[r - 1];
    }
    jaccard
}

/// Multi-class Lovász-softmax loss over per-pixel probabilities.
///
/// `probs` is class-major (K×n: class row, pixel column) and each pixel's
/// probabilities must sum to 1 within 1e-6. Per-class errors are sorted
/// descending and dotted with the Jaccard-extension increments; the loss is
/// averaged over classes present in the targets. Also returns the gradient
/// with respect to `probs`.
pub fn lovasz_softmax(
    probs: &[f64],
    classes: usize,
    targets: &[u16],
) -> Result<(f64, Vec<f64>)> {
    let n = targets.len();
    if probs.len() != classes * n {
        return Err(Error::dim("probability matrix does not match target count"));
    }
    for i in 0..n {
        let col_sum: f64 = (0..classes).map(|c| probs[c * n + i]).sum();
        if (col_sum - 1.0).abs() > 1e-6 {
            return Err(Error::data(format!(
                "probabilities at pixel {i} sum to {col_sum}, not 1"
            )));
        }
        if targets[i] as usize >= classes {
            return Err(Error::data(format!("target {} out of range", targets[i])));
        }
    }
    let mut present: Vec<u16> = targets.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.is_empty() {
        return Ok((0.0, vec![0.0; probs.len()]));
    }

    let mut grad = vec![0.0; probs.len()];
    let mut loss = 0.0;
    for &c in &present {
        let fg: Vec<f64> = targets
            .iter()
            .map(|&t| if t == c { 1.0 } else { 0.0 })
            .collect();
        let errors: Vec<f64> = (0..n)
            .map(|i| (fg[i] - probs[c as usize * n + i]).abs())
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            errors[b]
                .partial_cmp(&errors[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let fg_sorted: Vec<f64> = order.iter().map(|&i| fg[i]).collect();
        let gj = lovasz_grad(&fg_sorted);
        for (rank, &i) in order.iter().enumerate() {
            loss += errors[i] * gj[rank];
            // d|fg - p|/dp = -sign(fg - p)
            let sign = (fg[i] - probs[c as usize * n + i]).signum();
            let s = if errors[i] == 0.0 { 0.0 } else { sign };
            grad[c as usize * n + i] += -s * gj[rank] / present.len() as f64;
        }
    }
    Ok((loss / present.len() as f64, grad))
}

/// λ-weighted sum of the five loss components.
pub fn total_loss(components: &LossComponents, w: &LossWeights) -> f64 {
    w.lambda_depth * components.depth
        + w.lambda_seg * components.seg
        + w.lambda_pts * components.pts
        + w.lambda_mask_occ * components.mask_occ
        + w.lambda_kl * components.distill
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ce_saturated_margin_is_zero() {
        // +50 margin on the target class.
        let logits = vec![50.0, 0.0, 0.0, 0.0, 0.0, 50.0, 0.0, 0.0];
        let (loss, _) = cross_entropy(&logits, 4, &[0, 1]).unwrap();
        assert!(loss < 1e-9);
    }

    #[test]
    fn ce_uniform_is_ln_k() {
        let logits = vec![0.0; 4];
        let (loss, _) = cross_entropy(&logits, 4, &[2]).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_rejects_target_out_of_range() {
        assert!(cross_entropy(&[0.0, 0.0], 2, &[2]).is_err());
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let classes = 5;
        let n = 6;
        let mut logits: Vec<f64> = (0..n * classes).map(|_| rng.random_range(-2.0..2.0)).collect();
        let targets: Vec<u16> = (0..n).map(|_| rng.random_range(0..classes as u16)).collect();
        let (_, grad) = cross_entropy(&logits, classes, &targets).unwrap();
        let h = 1e-6;
        for idx in 0..logits.len() {
            let orig = logits[idx];
            logits[idx] = orig + h;
            let (lp, _) = cross_entropy(&logits, classes, &targets).unwrap();
            logits[idx] = orig - h;
            let (lm, _) = cross_entropy(&logits, classes, &targets).unwrap();
            logits[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let denom = grad[idx].abs().max(1.0);
            assert!(
                ((grad[idx] - fd) / denom).abs() < 1e-4,
                "idx {idx}: {} vs {fd}",
                grad[idx]
            );
        }
    }

    #[test]
    fn masked_ce_all_ones_equals_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let logits: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let targets = [0u16, 2, 1];
        let (a, ga) = cross_entropy(&logits, 4, &targets).unwrap();
        let (b, gb) = masked_cross_entropy(&logits, 4, &targets, &[true; 3]).unwrap();
        assert_eq!(a, b);
        assert_eq!(ga, gb);
    }

    #[test]
    fn masked_ce_zero_mask_is_zero() {
        let logits = vec![1.0, -1.0, 0.5, 0.25];
        let (loss, grad) = masked_cross_entropy(&logits, 2, &[0, 1], &[false, false]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn masked_ce_equals_filtered_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let classes = 3;
        let n = 10;
        let logits: Vec<f64> = (0..n * classes).map(|_| rng.random_range(-2.0..2.0)).collect();
        let targets: Vec<u16> = (0..n).map(|_| rng.random_range(0..3u16)).collect();
        let mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let (masked, _) = masked_cross_entropy(&logits, classes, &targets, &mask).unwrap();

        // Oracle: filter first, then run plain cross entropy.
        let mut f_logits = Vec::new();
        let mut f_targets = Vec::new();
        for i in 0..n {
            if mask[i] {
                f_logits.extend_from_slice(&logits[i * classes..(i + 1) * classes]);
                f_targets.push(targets[i]);
            }
        }
        if f_targets.is_empty() {
            assert_eq!(masked, 0.0);
        } else {
            let (filtered, _) = cross_entropy(&f_logits, classes, &f_targets).unwrap();
            assert!((masked - filtered).abs() < 1e-12);
        }
    }

    fn one_hot_probs(targets: &[u16], classes: usize) -> Vec<f64> {
        let n = targets.len();
        let mut p = vec![0.0; classes * n];
        for (i, &t) in targets.iter().enumerate() {
            p[t as usize * n + i] = 1.0;
        }
        p
    }

    #[test]
    fn lovasz_perfect_prediction_is_zero() {
        let targets = [0u16, 1, 2, 1, 0, 2];
        let probs = one_hot_probs(&targets, 3);
        let (loss, grad) = lovasz_softmax(&probs, 3, &targets).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grad.iter().all(|&g| g.abs() < 1e-12));
    }

    #[test]
    fn lovasz_single_pixel_fully_wrong_is_one() {
        // Target class 0, prediction puts probability 1 on class 1.
        let probs = vec![0.0, 1.0]; // K=2, n=1, class-major
        let (loss, _) = lovasz_softmax(&probs, 2, &[0]).unwrap();
        assert!((loss - 1.0).abs() < 1e-12);
    }

    /// Direct Lovász-extension oracle: walks the sorted chain of "mistake"
    /// sets and accumulates set-function increments computed by counting.
    fn lovasz_extension_oracle(probs: &[f64], _classes: usize, targets: &[u16]) -> f64 {
        let n = targets.len();
        let mut present: Vec<u16> = targets.to_vec();
        present.sort_unstable();
        present.dedup();
        let mut total = 0.0;
        for &c in &present {
            let fg: Vec<bool> = targets.iter().map(|&t| t == c).collect();
            let errors: Vec<f64> = (0..n)
                .map(|i| {
                    let f = if fg[i] { 1.0 } else { 0.0 };
                    (f - probs[c as usize * n + i]).abs()
                })
                .collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| errors[b].partial_cmp(&errors[a]).unwrap().then(a.cmp(&b)));

            // Set function: jaccard loss of treating S as mispredicted.
            let delta = |s: &[usize]| -> f64 {
                let gts = fg.iter().filter(|&&f| f).count();
                let fg_in_s = s.iter().filter(|&&i| fg[i]).count();
                let nonfg_in_s = s.len() - fg_in_s;
                1.0 - (gts - fg_in_s) as f64 / (gts + nonfg_in_s) as f64
            };
            let mut chain: Vec<usize> = Vec::new();
            let mut prev = 0.0; // delta(empty set)
            for &i in &order {
                chain.push(i);
                let cur = delta(&chain);
                total += errors[i] * (cur - prev);
                prev = cur;
            }
        }
        total / present.len() as f64
    }

    fn random_prob_instance(
        seed: u64,
        classes: usize,
        n: usize,
    ) -> (Vec<f64>, Vec<u16>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut probs = vec![0.0; classes * n];
        for i in 0..n {
            let raw: Vec<f64> = (0..classes).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            for c in 0..classes {
                probs[c * n + i] = raw[c] / s;
            }
        }
        let targets: Vec<u16> = (0..n).map(|_| rng.random_range(0..classes as u16)).collect();
        (probs, targets)
    }

    #[test]
    fn lovasz_matches_direct_extension_oracle() {
        for seed in 0..20 {
            let (probs, targets) = random_prob_instance(seed, 3, 6);
            let (loss, _) = lovasz_softmax(&probs, 3, &targets).unwrap();
            let oracle = lovasz_extension_oracle(&probs, 3, &targets);
            assert!(
                (loss - oracle).abs() < 1e-9,
                "seed {seed}: {loss} vs {oracle}"
            );
        }
    }

    #[test]
    fn lovasz_gradient_matches_finite_differences() {
        // The loss is piecewise linear, so central differences are exact as
        // long as the step does not cross a sort boundary.
        let (mut probs, targets) = random_prob_instance(99, 3, 6);
        let (_, grad) = lovasz_softmax(&probs, 3, &targets).unwrap();
        let h = 5e-7;
        for idx in 0..probs.len() {
            let orig = probs[idx];
            probs[idx] = orig + h;
            let (lp, _) = lovasz_softmax(&probs, 3, &targets).unwrap();
            probs[idx] = orig - h;
            let (lm, _) = lovasz_softmax(&probs, 3, &targets).unwrap();
            probs[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let denom = grad[idx].abs().max(1.0);
            assert!(
                ((grad[idx] - fd) / denom).abs() < 1e-4,
                "idx {idx}: analytic {} vs fd {fd}",
                grad[idx]
            );
        }
    }

    #[test]
    fn lovasz_rejects_malformed_probabilities() {
        let probs = vec![0.9, 0.9, 0.3, 0.3]; // columns sum to 1.2
        assert!(lovasz_softmax(&probs, 2, &[0, 1]).is_err());
    }

    #[test]
    fn total_loss_zero_components() {
        let total = total_loss(&LossComponents::default(), &LossWeights::default());
        assert_eq!(total, 0.0);
    }

    #[test]
    fn total_loss_unit_components_default_weights() {
        let components = LossComponents {
            depth: 1.0,
            seg: 1.0,
            pts: 1.0,
            mask_occ: 1.0,
            distill: 1.0,
        };
        let total = total_loss(&components, &LossWeights::default());
        assert_eq!(total, 3.55);
    }

    #[test]
    fn total_loss_matches_dot_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for _ in 0..20 {
            let components = LossComponents {
                depth: rng.random_range(0.0..4.0),
                seg: rng.random_range(0.0..4.0),
                pts: rng.random_range(0.0..4.0),
                mask_occ: rng.random_range(0.0..4.0),
                distill: rng.random_range(0.0..4.0),
            };
            let w = LossWeights {
                lambda_depth: rng.random_range(0.0..2.0),
                lambda_seg: rng.random_range(0.0..2.0),
                lambda_pts: rng.random_range(0.0..2.0),
                lambda_mask_occ: rng.random_range(0.0..2.0),
                lambda_kl: rng.random_range(0.0..2.0),
            };
            let vals = [
                components.depth,
                components.seg,
                components.pts,
                components.mask_occ,
                components.distill,
            ];
            let lambdas = [
                w.lambda_depth,
                w.lambda_seg,
                w.lambda_pts,
                w.lambda_mask_occ,
                w.lambda_kl,
            ];
            let dot: f64 = vals.iter().zip(&lambdas).map(|(a, b)| a * b).sum();
            assert!((total_loss(&components, &w) - dot).abs() < 1e-12);
        }
    }

    #[test]
    fn total_loss_homogeneous_in_components() {
        let components = LossComponents {
            depth: 0.3,
            seg: 1.2,
            pts: 0.7,
            mask_occ: 2.0,
            distill: 0.9,
        };
        let w = LossWeights::default();
        for t in [0.0, 0.5, 2.0, 10.0] {
            let scaled = LossComponents {
                depth: t * components.depth,
                seg: t * components.seg,
                pts: t * components.pts,
                mask_occ: t * components.mask_occ,
                distill: t * components.distill,
            };
            assert!((total_loss(&scaled, &w) - t * total_loss(&components, &w)).abs() < 1e-12);
        }
    }
}
