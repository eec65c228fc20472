//! Occupancy-driven active distillation: region masks, adaptive weights, and
//! the weighted feature-imitation loss with its analytic gradient.

use crate::error::{Error, Result};
use crate::grid::{BevFeatureMap, Grid2};
use crate::numeric::pairwise_sum;

/// H×W binary occupancy of a BEV feature map.
pub type OccupancyMask2D = Grid2<bool>;

/// Adaptive distillation weights: `alpha` on the active region, `rho·beta` on
/// the inactive region, 0 elsewhere, with `rho = N_AR / N_IR`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillWeightMap {
    weights: Grid2<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub rho: f64,
    n_ar: usize,
    n_ir: usize,
}

impl DistillWeightMap {
    pub fn weights(&self) -> &Grid2<f64> {
        &self.weights
    }

    pub fn n_ar(&self) -> usize {
        self.n_ar
    }

    pub fn n_ir(&self) -> usize {
        self.n_ir
    }

    /// Total weight over AR cells, computed from the integer count.
    pub fn ar_total_weight(&self) -> f64 {
        self.alpha * self.n_ar as f64
    }

    /// Total weight over IR cells, computed from the integer counts; zero when
    /// the inactive region is empty.
    pub fn ir_total_weight(&self) -> f64 {
        if self.n_ir == 0 {
            0.0
        } else {
            self.beta * self.n_ar as f64
        }
    }
}

/// Marks cells whose channel-wise L1 norm exceeds `eps` as occupied.
pub fn occupancy_mask(map: &BevFeatureMap, eps: f64) -> OccupancyMask2D {
    let mut out = Grid2::filled(map.height(), map.width(), false);
    for y in 0..map.height() {
        for x in 0..map.width() {
            let l1: f64 = (0..map.channels()).map(|c| map.at(c, y, x).abs()).sum();
            if l1 > eps {
                out.set(y, x, true);
            }
        }
    }
    out
}

/// Splits fused occupancy into the active region (image agrees) and the
/// inactive region (fused-only). The two are disjoint by construction.
pub fn region_split(
    m_fused: &OccupancyMask2D,
    m_img: &OccupancyMask2D,
) -> Result<(OccupancyMask2D, OccupancyMask2D)> {
    if !m_fused.same_dims(m_img) {
        return Err(Error::dim("occupancy masks must share dimensions"));
    }
    let mut ar = Grid2::filled(m_fused.height(), m_fused.width(), false);
    let mut ir = ar.clone();
    for (i, j, &f) in m_fused.indexed_iter() {
        if f {
            if *m_img.get(i, j) {
                ar.set(i, j, true);
            } else {
                ir.set(i, j, true);
            }
        }
    }
    Ok((ar, ir))
}

/// Builds the adaptive weight map from the AR/IR masks.
///
/// When the inactive region is empty the IR term vanishes and `rho` is
/// recorded as 0.
pub fn distill_weights(
    ar: &OccupancyMask2D,
    ir: &OccupancyMask2D,
    alpha: f64,
    beta: f64,
) -> Result<DistillWeightMap> {
    if !ar.same_dims(ir) {
        return Err(Error::dim("AR and IR masks must share dimensions"));
    }
    if alpha < 0.0 || beta < 0.0 {
        return Err(Error::config("alpha and beta must be non-negative"));
    }
    let n_ar = ar.data().iter().filter(|&&b| b).count();
    let n_ir = ir.data().iter().filter(|&&b| b).count();
    let rho = if n_ir > 0 {
        n_ar as f64 / n_ir as f64
    } else {
        0.0
    };
    let mut weights = Grid2::filled(ar.height(), ar.width(), 0.0);
    for (i, j, &a) in ar.indexed_iter() {
        if a {
            weights.set(i, j, alpha);
        } else if *ir.get(i, j) {
            weights.set(i, j, rho * beta);
        }
    }
    Ok(DistillWeightMap {
        weights,
        alpha,
        beta,
        rho,
        n_ar,
        n_ir,
    })
}

/// Weighted squared feature-imitation loss and its gradient with respect to the
/// camera features:
///
/// loss = Σ_c Σ_i Σ_j W(i,j)·(F_fuse − F_C)², dL/dF_C = −2·W·(F_fuse − F_C).
pub fn distill_loss(
    fused: &BevFeatureMap,
    camera: &BevFeatureMap,
    w: &DistillWeightMap,
) -> Result<(f64, BevFeatureMap)> {
    if !fused.same_dims(camera) {
        return Err(Error::dim("fused and camera maps must share dimensions"));
    }
    if w.weights.height() != fused.height() || w.weights.width() != fused.width() {
        return Err(Error::dim("weight map must match the feature plane"));
    }
    let (c_n, h, wd) = (fused.channels(), fused.height(), fused.width());
    let mut grad = BevFeatureMap::zeros(c_n, h, wd);
    let mut terms = Vec::with_capacity(c_n * h * wd);
    for c in 0..c_n {
        for y in 0..h {
            for x in 0..wd {
                let weight = *w.weights.get(y, x);
                let diff = fused.at(c, y, x) - camera.at(c, y, x);
                terms.push(weight * diff * diff);
                *grad.at_mut(c, y, x) = -2.0 * weight * diff;
            }
        }
    }
    Ok((pairwise_sum(&terms), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(channels: usize, h: usize, w: usize, rng: &mut impl Rng) -> BevFeatureMap {
        let data: Vec<f64> = (0..channels * h * w)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        BevFeatureMap::from_vec(channels, h, w, data).unwrap()
    }

    fn random_mask(h: usize, w: usize, density: f64, rng: &mut impl Rng) -> OccupancyMask2D {
        let mut m = Grid2::filled(h, w, false);
        for i in 0..h {
            for j in 0..w {
                if rng.random_bool(density) {
                    m.set(i, j, true);
                }
            }
        }
        m
    }

    #[test]
    fn occupancy_mask_zero_map() {
        let m = occupancy_mask(&BevFeatureMap::zeros(3, 4, 4), 0.0);
        assert!(m.data().iter().all(|&b| !b));
    }

    #[test]
    fn occupancy_mask_single_cell() {
        let mut map = BevFeatureMap::zeros(2, 4, 4);
        *map.at_mut(1, 2, 3) = -0.5;
        let m = occupancy_mask(&map, 0.0);
        let set: Vec<_> = m.indexed_iter().filter(|(_, _, &b)| b).collect();
        assert_eq!(set.len(), 1);
        assert_eq!((set[0].0, set[0].1), (2, 3));
    }

    #[test]
    fn occupancy_mask_matches_naive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut map = BevFeatureMap::zeros(3, 8, 8);
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    if rng.random_bool(0.2) {
                        *map.at_mut(c, y, x) = rng.random_range(-1.0..1.0);
                    }
                }
            }
        }
        let m = occupancy_mask(&map, 0.0);
        let bits = m.data().iter().filter(|&&b| b).count();
        let mut expect = 0;
        for y in 0..8 {
            for x in 0..8 {
                if (0..3).any(|c| map.at(c, y, x) != 0.0) {
                    expect += 1;
                }
            }
        }
        assert_eq!(bits, expect);
    }

    #[test]
    fn region_split_identical_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let m = random_mask(6, 6, 0.4, &mut rng);
        let (ar, ir) = region_split(&m, &m).unwrap();
        assert_eq!(ar, m);
        assert!(ir.data().iter().all(|&b| !b));
    }

    #[test]
    fn region_split_empty_image_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let fused = random_mask(6, 6, 0.4, &mut rng);
        let empty = Grid2::filled(6, 6, false);
        let (ar, ir) = region_split(&fused, &empty).unwrap();
        assert!(ar.data().iter().all(|&b| !b));
        assert_eq!(ir, fused);
    }

    #[test]
    fn region_split_set_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..10 {
            let fused = random_mask(8, 8, 0.5, &mut rng);
            let img = random_mask(8, 8, 0.5, &mut rng);
            let (ar, ir) = region_split(&fused, &img).unwrap();
            for i in 0..8 {
                for j in 0..8 {
                    let f = *fused.get(i, j);
                    let m = *img.get(i, j);
                    assert_eq!(*ar.get(i, j), f && m);
                    assert_eq!(*ir.get(i, j), f && !m);
                    assert!(!(*ar.get(i, j) && *ir.get(i, j)), "AR and IR overlap");
                }
            }
        }
    }

    #[test]
    fn weights_example_from_counts() {
        // N_AR = 4, N_IR = 2, alpha = beta = 1: AR weight 1, IR weight 2.
        let mut ar = Grid2::filled(3, 3, false);
        for &(i, j) in &[(0, 0), (0, 1), (1, 0), (1, 1)] {
            ar.set(i, j, true);
        }
        let mut ir = Grid2::filled(3, 3, false);
        ir.set(2, 0, true);
        ir.set(2, 1, true);
        let w = distill_weights(&ar, &ir, 1.0, 1.0).unwrap();
        assert_eq!(*w.weights().get(0, 0), 1.0);
        assert_eq!(*w.weights().get(2, 0), 2.0);
        assert_eq!(*w.weights().get(2, 2), 0.0);
        assert_eq!(w.rho, 2.0);
    }

    #[test]
    fn weights_empty_ir_drops_term() {
        let mut ar = Grid2::filled(2, 2, false);
        ar.set(0, 0, true);
        let ir = Grid2::filled(2, 2, false);
        let w = distill_weights(&ar, &ir, 0.7, 1.3).unwrap();
        assert_eq!(w.rho, 0.0);
        assert_eq!(w.ir_total_weight(), 0.0);
        assert_eq!(w.ar_total_weight(), 0.7);
    }

    #[test]
    fn weights_balance_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for _ in 0..20 {
            let fused = random_mask(10, 10, 0.5, &mut rng);
            let img = random_mask(10, 10, 0.5, &mut rng);
            let (ar, ir) = region_split(&fused, &img).unwrap();
            let w = distill_weights(&ar, &ir, 1.0, 1.0).unwrap();
            if w.n_ir() == 0 {
                continue;
            }
            // Exact via the integer path.
            assert_eq!(w.ar_total_weight(), w.n_ar() as f64);
            assert_eq!(w.ir_total_weight(), w.n_ar() as f64);
            // Per-cell sums agree to rounding.
            let mut sum_ar = 0.0;
            let mut sum_ir = 0.0;
            for (i, j, &wt) in w.weights().indexed_iter() {
                if *ar.get(i, j) {
                    sum_ar += wt;
                } else if *ir.get(i, j) {
                    sum_ir += wt;
                }
            }
            assert!((sum_ar - w.n_ar() as f64).abs() < 1e-9);
            assert!((sum_ir - w.n_ar() as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn loss_zero_when_features_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let map = random_map(4, 6, 6, &mut rng);
        let ar = random_mask(6, 6, 0.5, &mut rng);
        let ir = Grid2::filled(6, 6, false);
        let w = distill_weights(&ar, &ir, 1.0, 1.0).unwrap();
        let (loss, grad) = distill_loss(&map, &map, &w).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn loss_zero_under_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let fused = random_map(3, 5, 5, &mut rng);
        let camera = random_map(3, 5, 5, &mut rng);
        let empty = Grid2::filled(5, 5, false);
        let w = distill_weights(&empty, &empty, 1.0, 1.0).unwrap();
        let (loss, _) = distill_loss(&fused, &camera, &w).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn loss_non_negative_and_zero_iff_weighted_agreement() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let fused = random_map(2, 4, 4, &mut rng);
        let mut camera = fused.clone();
        // Disagree only on an unweighted cell.
        let mut ar = Grid2::filled(4, 4, false);
        ar.set(0, 0, true);
        let ir = Grid2::filled(4, 4, false);
        let w = distill_weights(&ar, &ir, 1.0, 1.0).unwrap();
        *camera.at_mut(0, 3, 3) += 5.0;
        let (loss, _) = distill_loss(&fused, &camera, &w).unwrap();
        assert_eq!(loss, 0.0);
        // Disagree on the weighted cell.
        *camera.at_mut(0, 0, 0) += 1.0;
        let (loss, _) = distill_loss(&fused, &camera, &w).unwrap();
        assert!(loss > 0.0);
    }

    #[test]
    fn gradient_matches_central_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let fused = random_map(4, 8, 8, &mut rng);
        let mut camera = random_map(4, 8, 8, &mut rng);
        let fm = random_mask(8, 8, 0.6, &mut rng);
        let im = random_mask(8, 8, 0.5, &mut rng);
        let (ar, ir) = region_split(&fm, &im).unwrap();
        let w = distill_weights(&ar, &ir, 1.0, 1.0).unwrap();
        let (_, grad) = distill_loss(&fused, &camera, &w).unwrap();

        let h = 1e-5;
        let mut max_rel: f64 = 0.0;
        let mut max_abs_grad: f64 = 0.0;
        for &g in grad.data() {
            max_abs_grad = max_abs_grad.max(g.abs());
        }
        for c in 0..4 {
            for y in 0..8 {
                for x in 0..8 {
                    let orig = camera.at(c, y, x);
                    *camera.at_mut(c, y, x) = orig + h;
                    let (lp, _) = distill_loss(&fused, &camera, &w).unwrap();
                    *camera.at_mut(c, y, x) = orig - h;
                    let (lm, _) = distill_loss(&fused, &camera, &w).unwrap();
                    *camera.at_mut(c, y, x) = orig;
                    let fd = (lp - lm) / (2.0 * h);
                    max_rel = max_rel.max((grad.at(c, y, x) - fd).abs());
                }
            }
        }
        assert!(
            max_rel / max_abs_grad.max(1.0) < 1e-4,
            "gradient FD mismatch: {max_rel}"
        );
    }
}
