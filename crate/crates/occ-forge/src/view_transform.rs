//! Semantic- and depth-guided lifting of image features to BEV.
//!
//! The stages mirror the view-transformation pipeline: scatter LiDAR co-points
//! into a sparse depth map, diffuse depth inside same-class mask regions, expand
//! each extended depth into symmetric virtual-point hypotheses, and pool the
//! weighted image features into the BEV plane.

use nalgebra::Point3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{back_project, project, CameraIntrinsics, Extrinsics, LidarPoint, PixelDepth};
use crate::grid::{BevFeatureMap, BevGridSpec, Grid2};
use crate::numeric::softmax;

/// H×W metric depth in meters; 0 means "no measurement".
pub type DepthMap = Grid2<f64>;

/// H×W semantic class ids; 0 means background/unlabeled.
pub type SemanticMask = Grid2<u16>;

/// Depth hypotheses are clamped to stay above this floor (meters); prevents
/// degenerate back-projection.
pub const DEPTH_FLOOR: f64 = 0.05;

/// How the `layers` hyperparameter is read when building hypotheses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayersMeaning {
    /// `layers` hypotheses on each side of the co-point depth (2·layers total).
    PerSide,
    /// `layers` hypotheses in total (must be even).
    Total,
}

impl LayersMeaning {
    /// Converts the configured layer count to hypotheses per side.
    pub fn side_layers(&self, layers: usize) -> Result<usize> {
        match self {
            LayersMeaning::PerSide => Ok(layers),
            LayersMeaning::Total => {
                if !layers.is_multiple_of(2) {
                    return Err(Error::config(
                        "layers must be even when interpreted as a total count",
                    ));
                }
                Ok(layers / 2)
            }
        }
    }
}

/// Image texture features (C×H×W) plus per-pixel pre-softmax depth logits (H×W×B).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    depth_bins: usize,
    features: Vec<f64>,
    depth_logits: Vec<f64>,
}

impl ImageFeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize, depth_bins: usize) -> Self {
        Self {
            channels,
            height,
            width,
            depth_bins,
            features: vec![0.0; channels * height * width],
            depth_logits: vec![0.0; height * width * depth_bins],
        }
    }

    pub fn from_parts(
        channels: usize,
        height: usize,
        width: usize,
        depth_bins: usize,
        features: Vec<f64>,
        depth_logits: Vec<f64>,
    ) -> Result<Self> {
        if features.len() != channels * height * width {
            return Err(Error::dim("feature tensor length mismatch"));
        }
        if depth_logits.len() != height * width * depth_bins {
            return Err(Error::dim("depth logit tensor length mismatch"));
        }
        Ok(Self {
            channels,
            height,
            width,
            depth_bins,
            features,
            depth_logits,
        })
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of depth hypotheses per pixel (B).
    #[inline]
    pub fn depth_bins(&self) -> usize {
        self.depth_bins
    }

    pub fn feature_at(&self, row: usize, col: usize) -> Vec<f64> {
        let plane = self.height * self.width;
        (0..self.channels)
            .map(|c| self.features[c * plane + row * self.width + col])
            .collect()
    }

    pub fn set_feature(&mut self, row: usize, col: usize, values: &[f64]) {
        debug_assert_eq!(values.len(), self.channels);
        let plane = self.height * self.width;
        for (c, v) in values.iter().enumerate() {
            self.features[c * plane + row * self.width + col] = *v;
        }
    }

    pub fn logits_at(&self, row: usize, col: usize) -> &[f64] {
        let base = (row * self.width + col) * self.depth_bins;
        &self.depth_logits[base..base + self.depth_bins]
    }

    pub fn set_logits(&mut self, row: usize, col: usize, values: &[f64]) {
        debug_assert_eq!(values.len(), self.depth_bins);
        let base = (row * self.width + col) * self.depth_bins;
        self.depth_logits[base..base + self.depth_bins].copy_from_slice(values);
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn depth_logits(&self) -> &[f64] {
        &self.depth_logits
    }
}

/// Per-pixel depth hypothesis lists; empty where the extended depth map is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthHypotheses {
    height: usize,
    width: usize,
    lists: Vec<Vec<f64>>,
}

impl DepthHypotheses {
    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        &self.lists[row * self.width + col]
    }

    pub fn from_lists(height: usize, width: usize, lists: Vec<Vec<f64>>) -> Result<Self> {
        if lists.len() != height * width {
            return Err(Error::dim("hypothesis list count mismatch"));
        }
        Ok(Self {
            height,
            width,
            lists,
        })
    }
}

/// One weighted depth hypothesis along a pixel's ray.
///
/// The feature vector it carries is `weight · F_t(row, col)` of the source map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VirtualPoint {
    pub row: usize,
    pub col: usize,
    pub depth: f64,
    pub weight: f64,
}

/// Projects LiDAR points into the image and rasterizes their depths and classes.
///
/// Cell collisions keep the smaller depth (the closest surface wins both the
/// depth and the class entry).
pub fn scatter_copoints(
    points: &[LidarPoint],
    ex: &Extrinsics,
    k: &CameraIntrinsics,
) -> (DepthMap, SemanticMask) {
    let mut depth = Grid2::filled(k.height as usize, k.width as usize, 0.0);
    let mut classes = Grid2::filled(k.height as usize, k.width as usize, 0u16);
    for pt in points {
        if let Some(pd) = project(&pt.position, ex, k) {
            let row = pd.v.floor() as usize;
            let col = pd.u.floor() as usize;
            let cur = *depth.get(row, col);
            if cur == 0.0 || pd.depth < cur {
                depth.set(row, col, pd.depth);
                classes.set(row, col, pt.class);
            }
        }
    }
    (depth, classes)
}

/// Diffuses measured depths across same-class mask regions.
///
/// For each unmeasured pixel with a nonzero mask label, the output is the mean
/// of measured depths within the disk of radius `radius_px` that share the
/// pixel's label; pixels with no qualifying neighbor stay 0. Pixels that carry
/// an original measurement keep it exactly, and mask-0 pixels are never given
/// diffused depth.
pub fn diffuse_depth(depth: &DepthMap, mask: &SemanticMask, radius_px: usize) -> Result<DepthMap> {
    if !depth.same_dims(mask) {
        return Err(Error::dim("depth map and semantic mask sizes differ"));
    }
    let (h, w) = (depth.height(), depth.width());
    let r = radius_px as isize;
    let r2 = (radius_px * radius_px) as isize;

    // Disk offsets, including (0, 0).
    let mut disk = Vec::new();
    for di in -r..=r {
        for dj in -r..=r {
            if di * di + dj * dj <= r2 {
                disk.push((di, dj));
            }
        }
    }

    let out: Vec<f64> = (0..h * w)
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx / w, idx % w);
            let measured = *depth.get(i, j);
            if measured > 0.0 {
                return measured;
            }
            let label = *mask.get(i, j);
            if label == 0 {
                return 0.0;
            }
            let mut sum = 0.0;
            let mut count = 0usize;
            for &(di, dj) in &disk {
                let p = i as isize + di;
                let q = j as isize + dj;
                if p < 0 || q < 0 || p >= h as isize || q >= w as isize {
                    continue;
                }
                let d = *depth.get(p as usize, q as usize);
                if d > 0.0 && *mask.get(p as usize, q as usize) == label {
                    sum += d;
                    count += 1;
                }
            }
            if count > 0 {
                sum / count as f64
            } else {
                0.0
            }
        })
        .collect();

    Grid2::from_vec(h, w, out)
}

/// Symmetric depth offsets with linearly growing gaps: the k-th offset is
/// `(range/2)·k(k+1)/(l(l+1))`, so spacing increases away from the co-point and
/// the outermost hypotheses sit at ±range/2.
fn hypothesis_offsets(range_m: f64, layers: usize) -> Vec<f64> {
    let denom = (layers * (layers + 1)) as f64;
    (1..=layers)
        .map(|k| 0.5 * range_m * (k * (k + 1)) as f64 / denom)
        .collect()
}

/// Expands each measured pixel of the extended depth map into 2·layers depth
/// hypotheses symmetric about the pixel's depth. Pixels with depth 0 emit none.
pub fn discretize_depths(
    extended: &DepthMap,
    range_m: f64,
    layers: usize,
) -> Result<DepthHypotheses> {
    if layers == 0 {
        return Err(Error::config("discretization layers must be >= 1"));
    }
    if range_m.is_nan() || range_m <= 0.0 {
        return Err(Error::config("discretization range must be positive"));
    }
    let offsets = hypothesis_offsets(range_m, layers);
    let lists: Vec<Vec<f64>> = extended
        .data()
        .iter()
        .map(|&d| {
            if d <= 0.0 {
                return Vec::new();
            }
            let mut hs = Vec::with_capacity(2 * layers);
            for &off in offsets.iter().rev() {
                hs.push((d - off).max(DEPTH_FLOOR));
            }
            for &off in offsets.iter() {
                hs.push((d + off).max(DEPTH_FLOOR));
            }
            hs
        })
        .collect();
    DepthHypotheses::from_lists(extended.height(), extended.width(), lists)
}

/// Materializes the weighted virtual points for a feature map and hypothesis
/// set, in row-major pixel order then hypothesis order.
///
/// Weights per pixel are the softmax of its depth logits, so they sum to 1.
pub fn virtual_points(
    img: &ImageFeatureMap,
    hyp: &DepthHypotheses,
) -> Result<Vec<VirtualPoint>> {
    if img.height() != hyp.height() || img.width() != hyp.width() {
        return Err(Error::dim("feature map and hypothesis grid sizes differ"));
    }
    let mut points = Vec::new();
    for row in 0..img.height() {
        for col in 0..img.width() {
            let depths = hyp.at(row, col);
            if depths.is_empty() {
                continue;
            }
            if depths.len() != img.depth_bins() {
                return Err(Error::dim(format!(
                    "pixel ({row},{col}) has {} hypotheses but the feature map carries {} depth bins",
                    depths.len(),
                    img.depth_bins()
                )));
            }
            let weights = softmax(img.logits_at(row, col));
            for (d, wgt) in depths.iter().zip(weights) {
                points.push(VirtualPoint {
                    row,
                    col,
                    depth: *d,
                    weight: wgt,
                });
            }
        }
    }
    Ok(points)
}

/// Back-projects every virtual point and pools `weight · F_t` into BEV cells.
///
/// Summation order is fixed (row-major pixel order, then hypothesis index), so
/// the result is bit-reproducible across thread counts. Points outside the BEV
/// extent are dropped.
pub fn lift_to_bev(
    img: &ImageFeatureMap,
    hyp: &DepthHypotheses,
    ex: &Extrinsics,
    k: &CameraIntrinsics,
    spec: &BevGridSpec,
) -> Result<BevFeatureMap> {
    spec.validate()?;
    if spec.channels != img.channels() {
        return Err(Error::dim(format!(
            "BEV spec expects {} channels, feature map has {}",
            spec.channels,
            img.channels()
        )));
    }
    let points = virtual_points(img, hyp)?;

    // Bin in parallel, then accumulate sequentially in the fixed point order.
    let binned: Vec<Option<(usize, usize)>> = points
        .par_iter()
        .map(|vp| {
            let pd = PixelDepth {
                u: vp.col as f64 + 0.5,
                v: vp.row as f64 + 0.5,
                depth: vp.depth,
            };
            let p: Point3<f64> = back_project(&pd, ex, k).expect("hypothesis depths are positive");
            spec.cell_index(p.x, p.y)
        })
        .collect();

    let mut bev = BevFeatureMap::zeros(spec.channels, spec.height(), spec.width());
    for (vp, cell) in points.iter().zip(binned) {
        if let Some((iy, ix)) = cell {
            let feat = img.feature_at(vp.row, vp.col);
            bev.add_scaled(iy, ix, &feat, vp.weight);
        }
    }
    Ok(bev)
}
