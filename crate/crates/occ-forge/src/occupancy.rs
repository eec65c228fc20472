//! Channel-to-height decoding of BEV features into a 3D semantic occupancy
//! grid, plus label argmax.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BevFeatureMap, BevGridSpec, Grid3};

/// Metric extent and resolution of the 3D voxel volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelGridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    /// Horizontal cell edge (meters).
    pub cell_xy: f64,
    /// Vertical cell edge (meters).
    pub cell_z: f64,
}

impl VoxelGridSpec {
    /// Occ3D-style defaults: ±40 m horizontally, −1..5.4 m vertically, 0.4 m voxels.
    pub fn occ3d_default() -> Self {
        Self {
            x_min: -40.0,
            x_max: 40.0,
            y_min: -40.0,
            y_max: 40.0,
            z_min: -1.0,
            z_max: 5.4,
            cell_xy: 0.4,
            cell_z: 0.4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cell_xy > 0.0 && self.cell_z > 0.0) {
            return Err(Error::config("voxel cells must be positive"));
        }
        for (lo, hi, cell, name) in [
            (self.x_min, self.x_max, self.cell_xy, "x"),
            (self.y_min, self.y_max, self.cell_xy, "y"),
            (self.z_min, self.z_max, self.cell_z, "z"),
        ] {
            if hi.is_nan() || lo.is_nan() || hi <= lo {
                return Err(Error::config(format!("{name} span must be positive")));
            }
            let n = (hi - lo) / cell;
            if (n - n.round()).abs() > 1e-6 {
                return Err(Error::config(format!(
                    "{name} span is not an integer multiple of the cell size"
                )));
            }
        }
        Ok(())
    }

    pub fn nx(&self) -> usize {
        ((self.x_max - self.x_min) / self.cell_xy).round() as usize
    }

    pub fn ny(&self) -> usize {
        ((self.y_max - self.y_min) / self.cell_xy).round() as usize
    }

    pub fn nz(&self) -> usize {
        ((self.z_max - self.z_min) / self.cell_z).round() as usize
    }

    /// BEV spec covering the horizontal extent with the given channel count.
    pub fn bev_spec(&self, channels: usize) -> BevGridSpec {
        BevGridSpec {
            x_min: self.x_min,
            x_max: self.x_max,
            y_min: self.y_min,
            y_max: self.y_max,
            cell: self.cell_xy,
            channels,
        }
    }

    pub fn voxel_center(&self, iy: usize, ix: usize, iz: usize) -> (f64, f64, f64) {
        (
            self.x_min + (ix as f64 + 0.5) * self.cell_xy,
            self.y_min + (iy as f64 + 0.5) * self.cell_xy,
            self.z_min + (iz as f64 + 0.5) * self.cell_z,
        )
    }

    /// Voxel index containing a world point; None when outside the volume.
    pub fn voxel_index(&self, x: f64, y: f64, z: f64) -> Option<(usize, usize, usize)> {
        if x < self.x_min || y < self.y_min || z < self.z_min {
            return None;
        }
        let ix = ((x - self.x_min) / self.cell_xy).floor() as usize;
        let iy = ((y - self.y_min) / self.cell_xy).floor() as usize;
        let iz = ((z - self.z_min) / self.cell_z).floor() as usize;
        if ix >= self.nx() || iy >= self.ny() || iz >= self.nz() {
            return None;
        }
        Some((iy, ix, iz))
    }
}

/// Per-voxel class logits laid out [class][z][y][x].
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsGrid {
    classes: usize,
    depth: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl LogitsGrid {
    pub fn zeros(classes: usize, depth: usize, height: usize, width: usize) -> Self {
        Self {
            classes,
            depth,
            height,
            width,
            data: vec![0.0; classes * depth * height * width],
        }
    }

    #[inline]
    pub fn classes(&self) -> usize {
        self.classes
    }

    #[inline]
    pub fn depth(&self) -> usize {
        self.depth
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn at(&self, class: usize, z: usize, y: usize, x: usize) -> f64 {
        self.data[((class * self.depth + z) * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, class: usize, z: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[((class * self.depth + z) * self.height + y) * self.width + x]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// H×W×D semantic voxel labels; the last class id is the empty class.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    class_count: usize,
    labels: Grid3<u16>,
}

impl OccupancyGrid {
    /// All-empty grid.
    pub fn empty(class_count: usize, ny: usize, nx: usize, nz: usize) -> Self {
        let empty = (class_count - 1) as u16;
        Self {
            class_count,
            labels: Grid3::filled(ny, nx, nz, empty),
        }
    }

    pub fn from_labels(class_count: usize, labels: Grid3<u16>) -> Result<Self> {
        if labels.data().iter().any(|&l| l as usize >= class_count) {
            return Err(Error::data("label exceeds class count"));
        }
        Ok(Self {
            class_count,
            labels,
        })
    }

    #[inline]
    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// The id reserved for free space (the last class).
    #[inline]
    pub fn empty_class(&self) -> u16 {
        (self.class_count - 1) as u16
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize, usize) {
        self.labels.dims()
    }

    #[inline]
    pub fn label(&self, y: usize, x: usize, z: usize) -> u16 {
        *self.labels.get(y, x, z)
    }

    #[inline]
    pub fn set_label(&mut self, y: usize, x: usize, z: usize, label: u16) {
        debug_assert!((label as usize) < self.class_count);
        self.labels.set(y, x, z, label);
    }

    pub fn labels(&self) -> &Grid3<u16> {
        &self.labels
    }
}

/// Pure reshape from BEV channels to (class, height): channel c maps to
/// class = c / depth_bins, height = c % depth_bins. Lossless and invertible.
pub fn channel_to_height(
    bev: &BevFeatureMap,
    class_count: usize,
    depth_bins: usize,
) -> Result<LogitsGrid> {
    if bev.channels() != class_count * depth_bins {
        return Err(Error::dim(format!(
            "BEV carries {} channels, expected {} x {} = {}",
            bev.channels(),
            class_count,
            depth_bins,
            class_count * depth_bins
        )));
    }
    let (h, w) = (bev.height(), bev.width());
    let mut out = LogitsGrid::zeros(class_count, depth_bins, h, w);
    for class in 0..class_count {
        for z in 0..depth_bins {
            let c = class * depth_bins + z;
            for y in 0..h {
                for x in 0..w {
                    *out.at_mut(class, z, y, x) = bev.at(c, y, x);
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`channel_to_height`].
pub fn height_to_channel(logits: &LogitsGrid) -> BevFeatureMap {
    let (h, w) = (logits.height(), logits.width());
    let mut bev = BevFeatureMap::zeros(logits.classes() * logits.depth(), h, w);
    for class in 0..logits.classes() {
        for z in 0..logits.depth() {
            let c = class * logits.depth() + z;
            for y in 0..h {
                for x in 0..w {
                    *bev.at_mut(c, y, x) = logits.at(class, z, y, x);
                }
            }
        }
    }
    bev
}

/// Per-voxel argmax over classes; ties break toward the smaller class id.
pub fn decode_labels(logits: &LogitsGrid) -> OccupancyGrid {
    let (d, h, w) = (logits.depth(), logits.height(), logits.width());
    let mut grid = Grid3::filled(h, w, d, 0u16);
    for y in 0..h {
        for x in 0..w {
            for z in 0..d {
                let mut best = 0usize;
                let mut best_v = logits.at(0, z, y, x);
                for class in 1..logits.classes() {
                    let v = logits.at(class, z, y, x);
                    if v > best_v {
                        best_v = v;
                        best = class;
                    }
                }
                grid.set(y, x, z, best as u16);
            }
        }
    }
    OccupancyGrid {
        class_count: logits.classes(),
        labels: grid,
    }
}
