//! Occupancy evaluation: confusion accumulation, per-class IoU and mIoU,
//! occupied-vs-empty IoU, and distance-binned breakdowns.

use nalgebra::Point3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid3;
use crate::occupancy::{OccupancyGrid, VoxelGridSpec};

/// Per-voxel evaluation flag (1 = evaluate).
pub type VisibilityMask = Grid3<bool>;

/// (N+1)×(N+1) integer counts; rows index truth labels, columns predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    #[inline]
    pub fn classes(&self) -> usize {
        self.classes
    }

    #[inline]
    pub fn count(&self, truth: u16, pred: u16) -> u64 {
        self.counts[truth as usize * self.classes + pred as usize]
    }

    #[inline]
    pub fn add(&mut self, truth: u16, pred: u16) {
        self.counts[truth as usize * self.classes + pred as usize] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Exact integer merge of two accumulations.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.classes != other.classes {
            return Err(Error::dim("confusion matrices differ in class count"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn true_positives(&self, class: u16) -> u64 {
        self.count(class, class)
    }

    pub fn false_positives(&self, class: u16) -> u64 {
        (0..self.classes as u16)
            .filter(|&t| t != class)
            .map(|t| self.count(t, class))
            .sum()
    }

    pub fn false_negatives(&self, class: u16) -> u64 {
        (0..self.classes as u16)
            .filter(|&p| p != class)
            .map(|p| self.count(class, p))
            .sum()
    }
}

/// Accumulates prediction/truth label pairs over (optionally mask-restricted)
/// voxels. Parallel over voxel chunks with an exact integer merge.
pub fn accumulate(
    pred: &OccupancyGrid,
    truth: &OccupancyGrid,
    visible: Option<&VisibilityMask>,
) -> Result<ConfusionMatrix> {
    if pred.dims() != truth.dims() {
        return Err(Error::dim("prediction and truth grids differ in shape"));
    }
    if pred.class_count() != truth.class_count() {
        return Err(Error::dim("prediction and truth grids differ in class count"));
    }
    if let Some(mask) = visible {
        if mask.dims() != pred.dims() {
            return Err(Error::dim("visibility mask shape mismatch"));
        }
    }
    let classes = pred.class_count();
    let p = pred.labels().data();
    let t = truth.labels().data();
    let cm = p
        .par_chunks(4096)
        .zip(t.par_chunks(4096))
        .enumerate()
        .map(|(chunk_idx, (pc, tc))| {
            let base = chunk_idx * 4096;
            let mut local = ConfusionMatrix::new(classes);
            for (off, (&pv, &tv)) in pc.iter().zip(tc).enumerate() {
                let keep = match visible {
                    Some(mask) => mask.data()[base + off],
                    None => true,
                };
                if keep {
                    local.add(tv, pv);
                }
            }
            local
        })
        .reduce(
            || ConfusionMatrix::new(classes),
            |mut a, b| {
                a.merge(&b).expect("same class count");
                a
            },
        );
    Ok(cm)
}

/// How classes with an empty IoU denominator enter the mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UndefinedIouPolicy {
    /// Leave undefined classes out of the mean (default).
    Exclude,
    ScoreZero,
    ScoreOne,
}

/// IoU of one class, `None` when TP+FP+FN = 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class: u16,
    pub iou: Option<f64>,
}

/// Per-class IoU (TP/(TP+FP+FN)) and their mean over `include`.
///
/// Classes with a zero denominator are reported as undefined and handled per
/// `policy`; the mean is `None` when nothing contributes.
pub fn miou(
    cm: &ConfusionMatrix,
    include: &[u16],
    policy: UndefinedIouPolicy,
) -> Result<(Vec<ClassIou>, Option<f64>)> {
    if include.is_empty() {
        return Err(Error::config("include set must not be empty"));
    }
    let mut per_class = Vec::with_capacity(include.len());
    let mut sum = 0.0;
    let mut n = 0usize;
    for &c in include {
        if c as usize >= cm.classes() {
            return Err(Error::data(format!("class {c} outside confusion matrix")));
        }
        let tp = cm.true_positives(c);
        let denom = tp + cm.false_positives(c) + cm.false_negatives(c);
        let iou = if denom == 0 {
            match policy {
                UndefinedIouPolicy::Exclude => None,
                UndefinedIouPolicy::ScoreZero => Some(0.0),
                UndefinedIouPolicy::ScoreOne => Some(1.0),
            }
        } else {
            Some(tp as f64 / denom as f64)
        };
        if let Some(v) = iou {
            sum += v;
            n += 1;
        }
        per_class.push(ClassIou { class: c, iou });
    }
    let mean = if n > 0 { Some(sum / n as f64) } else { None };
    Ok((per_class, mean))
}

/// IoU of the union of all non-empty classes against the empty class (the
/// last class id). `None` when both grids are entirely empty.
pub fn binary_iou(cm: &ConfusionMatrix) -> Option<f64> {
    let empty = (cm.classes() - 1) as u16;
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fn_ = 0u64;
    for t in 0..cm.classes() as u16 {
        for p in 0..cm.classes() as u16 {
            let c = cm.count(t, p);
            match (t != empty, p != empty) {
                (true, true) => tp += c,
                (false, true) => fp += c,
                (true, false) => fn_ += c,
                (false, false) => {}
            }
        }
    }
    let denom = tp + fp + fn_;
    if denom == 0 {
        None
    } else {
        Some(tp as f64 / denom as f64)
    }
}

/// Metrics for one distance bin.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistanceBinReport {
    pub lo_m: f64,
    pub hi_m: f64,
    pub voxels: u64,
    pub binary_iou: Option<f64>,
    pub miou: Option<f64>,
    pub per_class: Vec<ClassIou>,
}

/// Evaluates per distance bin. `bin_edges` are upper edges in meters; bins are
/// [0, e1), [e1, e2), ... measured as horizontal distance from `ego` to each
/// voxel center.
#[allow(clippy::too_many_arguments)]
pub fn distance_binned_eval(
    pred: &OccupancyGrid,
    truth: &OccupancyGrid,
    spec: &VoxelGridSpec,
    ego: &Point3<f64>,
    bin_edges: &[f64],
    visible: Option<&VisibilityMask>,
    include: &[u16],
    policy: UndefinedIouPolicy,
) -> Result<Vec<DistanceBinReport>> {
    if bin_edges.is_empty() {
        return Err(Error::config("at least one bin edge is required"));
    }
    if bin_edges.windows(2).any(|w| w[1] <= w[0]) || bin_edges[0] <= 0.0 {
        return Err(Error::config("bin edges must be positive and increasing"));
    }
    let (ny, nx, nz) = pred.dims();
    if (ny, nx, nz) != truth.dims() {
        return Err(Error::dim("prediction and truth grids differ in shape"));
    }

    let mut reports = Vec::with_capacity(bin_edges.len());
    let mut lo = 0.0;
    for &hi in bin_edges {
        // Restrict evaluation to this bin through the visibility path.
        let mut mask = Grid3::filled(ny, nx, nz, false);
        for y in 0..ny {
            for x in 0..nx {
                let (cx, cy, _) = spec.voxel_center(y, x, 0);
                let dist = ((cx - ego.x).powi(2) + (cy - ego.y).powi(2)).sqrt();
                if dist < lo || dist >= hi {
                    continue;
                }
                for z in 0..nz {
                    let keep = match visible {
                        Some(v) => *v.get(y, x, z),
                        None => true,
                    };
                    mask.set(y, x, z, keep);
                }
            }
        }
        let cm = accumulate(pred, truth, Some(&mask))?;
        let (per_class, mean) = miou(&cm, include, policy)?;
        reports.push(DistanceBinReport {
            lo_m: lo,
            hi_m: hi,
            voxels: cm.total(),
            binary_iou: binary_iou(&cm),
            miou: mean,
            per_class,
        });
        lo = hi;
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(classes: usize, dims: (usize, usize, usize), seed: u64) -> OccupancyGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = OccupancyGrid::empty(classes, dims.0, dims.1, dims.2);
        for y in 0..dims.0 {
            for x in 0..dims.1 {
                for z in 0..dims.2 {
                    g.set_label(y, x, z, rng.random_range(0..classes as u16));
                }
            }
        }
        g
    }

    #[test]
    fn accumulate_perfect_prediction_is_diagonal() {
        let g = random_grid(4, (3, 3, 2), 60);
        let cm = accumulate(&g, &g, None).unwrap();
        for t in 0..4u16 {
            for p in 0..4u16 {
                if t != p {
                    assert_eq!(cm.count(t, p), 0);
                }
            }
        }
        assert_eq!(cm.total(), 18);
    }

    #[test]
    fn accumulate_invisible_everything_is_empty() {
        let g = random_grid(3, (2, 2, 2), 61);
        let mask = Grid3::filled(2, 2, 2, false);
        let cm = accumulate(&g, &g, Some(&mask)).unwrap();
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn accumulate_matches_naive_triple_loop() {
        let pred = random_grid(4, (5, 4, 3), 62);
        let truth = random_grid(4, (5, 4, 3), 63);
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let mut mask = Grid3::filled(5, 4, 3, false);
        for y in 0..5 {
            for x in 0..4 {
                for z in 0..3 {
                    mask.set(y, x, z, rng.random_bool(0.7));
                }
            }
        }
        let cm = accumulate(&pred, &truth, Some(&mask)).unwrap();
        let mut expect = ConfusionMatrix::new(4);
        for y in 0..5 {
            for x in 0..4 {
                for z in 0..3 {
                    if *mask.get(y, x, z) {
                        expect.add(truth.label(y, x, z), pred.label(y, x, z));
                    }
                }
            }
        }
        assert_eq!(cm, expect);
    }

    #[test]
    fn accumulate_additive_over_disjoint_splits() {
        let pred = random_grid(3, (4, 4, 4), 65);
        let truth = random_grid(3, (4, 4, 4), 66);
        let mut a = Grid3::filled(4, 4, 4, false);
        let mut b = Grid3::filled(4, 4, 4, false);
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        for y in 0..4 {
            for x in 0..4 {
                for z in 0..4 {
                    if rng.random_bool(0.5) {
                        a.set(y, x, z, true);
                    } else {
                        b.set(y, x, z, true);
                    }
                }
            }
        }
        let mut cm_a = accumulate(&pred, &truth, Some(&a)).unwrap();
        let cm_b = accumulate(&pred, &truth, Some(&b)).unwrap();
        let cm_all = accumulate(&pred, &truth, None).unwrap();
        cm_a.merge(&cm_b).unwrap();
        assert_eq!(cm_a, cm_all);
    }

    #[test]
    fn miou_perfect_two_class() {
        let mut cm = ConfusionMatrix::new(3);
        for _ in 0..5 {
            cm.add(0, 0);
        }
        for _ in 0..7 {
            cm.add(1, 1);
        }
        let (per_class, mean) = miou(&cm, &[0, 1], UndefinedIouPolicy::Exclude).unwrap();
        assert_eq!(per_class[0].iou, Some(1.0));
        assert_eq!(per_class[1].iou, Some(1.0));
        assert_eq!(mean, Some(1.0));
    }

    #[test]
    fn miou_hand_built_counts() {
        // Class 0: TP = 3, FP = 1, FN = 2 -> IoU = 3/6 = 0.5 exactly.
        let mut cm = ConfusionMatrix::new(2);
        for _ in 0..3 {
            cm.add(0, 0);
        }
        cm.add(1, 0); // FP for class 0
        cm.add(0, 1); // FN for class 0
        cm.add(0, 1); // FN for class 0
        let (per_class, _) = miou(&cm, &[0], UndefinedIouPolicy::Exclude).unwrap();
        assert_eq!(per_class[0].iou, Some(0.5));
    }

    #[test]
    fn miou_undefined_classes_excluded() {
        let mut cm = ConfusionMatrix::new(4);
        cm.add(0, 0);
        cm.add(1, 2); // classes 1 and 2 get counts; class 3 absent everywhere
        let (per_class, mean) = miou(&cm, &[0, 1, 2, 3], UndefinedIouPolicy::Exclude).unwrap();
        assert_eq!(per_class[3].iou, None);
        // class 0 IoU 1.0, class 1 IoU 0 (FN), class 2 IoU 0 (FP)
        assert_eq!(mean, Some((1.0 + 0.0 + 0.0) / 3.0));
        let (_, mean_zero) = miou(&cm, &[0, 1, 2, 3], UndefinedIouPolicy::ScoreOne).unwrap();
        assert_eq!(mean_zero, Some((1.0 + 0.0 + 0.0 + 1.0) / 4.0));
    }

    #[test]
    fn miou_matches_set_enumeration() {
        let pred = random_grid(4, (4, 4, 2), 68);
        let truth = random_grid(4, (4, 4, 2), 69);
        let cm = accumulate(&pred, &truth, None).unwrap();
        let include: Vec<u16> = (0..4).collect();
        let (per_class, _) = miou(&cm, &include, UndefinedIouPolicy::Exclude).unwrap();

        for &c in &include {
            // Enumerate voxel sets directly.
            let mut inter = 0u64;
            let mut uni = 0u64;
            for y in 0..4 {
                for x in 0..4 {
                    for z in 0..2 {
                        let in_pred = pred.label(y, x, z) == c;
                        let in_truth = truth.label(y, x, z) == c;
                        if in_pred && in_truth {
                            inter += 1;
                        }
                        if in_pred || in_truth {
                            uni += 1;
                        }
                    }
                }
            }
            let expect = if uni == 0 {
                None
            } else {
                Some(inter as f64 / uni as f64)
            };
            assert_eq!(per_class[c as usize].iou, expect, "class {c}");
        }
    }

    #[test]
    fn miou_permutation_equivariant() {
        let pred = random_grid(4, (3, 3, 3), 70);
        let truth = random_grid(4, (3, 3, 3), 71);
        // Permutation of class ids: 0->2, 1->0, 2->3, 3->1.
        let perm = [2u16, 0, 3, 1];
        let apply = |g: &OccupancyGrid| {
            let mut out = OccupancyGrid::empty(4, 3, 3, 3);
            for y in 0..3 {
                for x in 0..3 {
                    for z in 0..3 {
                        out.set_label(y, x, z, perm[g.label(y, x, z) as usize]);
                    }
                }
            }
            out
        };
        let cm = accumulate(&pred, &truth, None).unwrap();
        let cm_p = accumulate(&apply(&pred), &apply(&truth), None).unwrap();
        let (ious, _) = miou(&cm, &[0, 1, 2, 3], UndefinedIouPolicy::Exclude).unwrap();
        let (ious_p, _) = miou(&cm_p, &[0, 1, 2, 3], UndefinedIouPolicy::Exclude).unwrap();
        for c in 0..4usize {
            assert_eq!(ious[c].iou, ious_p[perm[c] as usize].iou);
        }
    }

    #[test]
    fn miou_bounds_and_max() {
        let pred = random_grid(5, (4, 4, 2), 72);
        let truth = random_grid(5, (4, 4, 2), 73);
        let cm = accumulate(&pred, &truth, None).unwrap();
        let include: Vec<u16> = (0..5).collect();
        let (per_class, mean) = miou(&cm, &include, UndefinedIouPolicy::Exclude).unwrap();
        let max_iou = per_class
            .iter()
            .filter_map(|c| c.iou)
            .fold(f64::NEG_INFINITY, f64::max);
        for c in &per_class {
            if let Some(v) = c.iou {
                assert!((0.0..=1.0).contains(&v));
            }
        }
        assert!(mean.unwrap() <= max_iou + 1e-12);
    }

    #[test]
    fn binary_iou_perfect_and_undefined() {
        let truth = random_grid(3, (3, 3, 2), 74);
        let cm = accumulate(&truth, &truth, None).unwrap();
        assert_eq!(binary_iou(&cm), Some(1.0));

        let empty = OccupancyGrid::empty(3, 2, 2, 2);
        let cm = accumulate(&empty, &empty, None).unwrap();
        assert_eq!(binary_iou(&cm), None);
    }

    #[test]
    fn binary_iou_matches_enumeration() {
        let pred = random_grid(3, (4, 4, 2), 75);
        let truth = random_grid(3, (4, 4, 2), 76);
        let cm = accumulate(&pred, &truth, None).unwrap();
        let empty = 2u16;
        let mut tp = 0u64;
        let mut fp = 0u64;
        let mut fn_ = 0u64;
        for y in 0..4 {
            for x in 0..4 {
                for z in 0..2 {
                    let p_occ = pred.label(y, x, z) != empty;
                    let t_occ = truth.label(y, x, z) != empty;
                    match (t_occ, p_occ) {
                        (true, true) => tp += 1,
                        (false, true) => fp += 1,
                        (true, false) => fn_ += 1,
                        _ => {}
                    }
                }
            }
        }
        assert_eq!(binary_iou(&cm), Some(tp as f64 / (tp + fp + fn_) as f64));
    }

    #[test]
    fn distance_bins_single_bin_equals_global() {
        let pred = random_grid(3, (4, 4, 2), 77);
        let truth = random_grid(3, (4, 4, 2), 78);
        let spec = VoxelGridSpec {
            x_min: -2.0,
            x_max: 2.0,
            y_min: -2.0,
            y_max: 2.0,
            z_min: 0.0,
            z_max: 2.0,
            cell_xy: 1.0,
            cell_z: 1.0,
        };
        let ego = Point3::new(0.0, 0.0, 0.0);
        let include: Vec<u16> = (0..3).collect();
        let reports = distance_binned_eval(
            &pred,
            &truth,
            &spec,
            &ego,
            &[1000.0],
            None,
            &include,
            UndefinedIouPolicy::Exclude,
        )
        .unwrap();
        assert_eq!(reports.len(), 1);
        let cm = accumulate(&pred, &truth, None).unwrap();
        let (_, global_miou) = miou(&cm, &include, UndefinedIouPolicy::Exclude).unwrap();
        assert_eq!(reports[0].miou, global_miou);
        assert_eq!(reports[0].binary_iou, binary_iou(&cm));
        assert_eq!(reports[0].voxels, 32);
    }

    #[test]
    fn distance_bins_two_bin_manual_split() {
        let pred = random_grid(3, (4, 4, 1), 79);
        let truth = random_grid(3, (4, 4, 1), 80);
        let spec = VoxelGridSpec {
            x_min: -2.0,
            x_max: 2.0,
            y_min: -2.0,
            y_max: 2.0,
            z_min: 0.0,
            z_max: 1.0,
            cell_xy: 1.0,
            cell_z: 1.0,
        };
        let ego = Point3::new(0.0, 0.0, 0.0);
        let include: Vec<u16> = (0..3).collect();
        let reports = distance_binned_eval(
            &pred,
            &truth,
            &spec,
            &ego,
            &[1.0, 10.0],
            None,
            &include,
            UndefinedIouPolicy::Exclude,
        )
        .unwrap();

        // Manual split by the same distance rule.
        let mut near = Grid3::filled(4, 4, 1, false);
        let mut far = Grid3::filled(4, 4, 1, false);
        for y in 0..4 {
            for x in 0..4 {
                let (cx, cy, _) = spec.voxel_center(y, x, 0);
                let d = (cx * cx + cy * cy).sqrt();
                if d < 1.0 {
                    near.set(y, x, 0, true);
                } else {
                    far.set(y, x, 0, true);
                }
            }
        }
        let cm_near = accumulate(&pred, &truth, Some(&near)).unwrap();
        let cm_far = accumulate(&pred, &truth, Some(&far)).unwrap();
        assert_eq!(reports[0].binary_iou, binary_iou(&cm_near));
        assert_eq!(reports[1].binary_iou, binary_iou(&cm_far));
        assert_eq!(reports[0].voxels + reports[1].voxels, 16);
    }

    #[test]
    fn distance_bins_empty_far_bin_undefined() {
        let pred = random_grid(3, (2, 2, 1), 81);
        let truth = random_grid(3, (2, 2, 1), 82);
        let spec = VoxelGridSpec {
            x_min: -1.0,
            x_max: 1.0,
            y_min: -1.0,
            y_max: 1.0,
            z_min: 0.0,
            z_max: 1.0,
            cell_xy: 1.0,
            cell_z: 1.0,
        };
        let ego = Point3::new(0.0, 0.0, 0.0);
        let reports = distance_binned_eval(
            &pred,
            &truth,
            &spec,
            &ego,
            &[5.0, 50.0],
            None,
            &[0, 1, 2],
            UndefinedIouPolicy::Exclude,
        )
        .unwrap();
        assert_eq!(reports[1].voxels, 0);
        assert_eq!(reports[1].binary_iou, None);
        assert_eq!(reports[1].miou, None);
    }
}
