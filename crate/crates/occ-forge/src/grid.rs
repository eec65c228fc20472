//! Dense row-major grid containers for image-plane maps, BEV planes, and voxel volumes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense H×W grid stored row-major: index = row * width + col.
///
/// Rows correspond to the image v/y axis, columns to u/x.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid2<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim(format!(
                "grid data length {} does not match {}x{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }
}

impl<T> Grid2<T> {
    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn same_dims<U>(&self, other: &Grid2<U>) -> bool {
        self.height == other.height && self.width == other.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> &T {
        &self.data[row * self.width + col]
    }

    #[inline]
    pub fn get_mut(&mut self, row: usize, col: usize) -> &mut T {
        &mut self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.width + col] = value;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Row-major iteration with coordinates.
    pub fn indexed_iter(&self) -> impl Iterator<Item = (usize, usize, &T)> {
        let width = self.width;
        self.data
            .iter()
            .enumerate()
            .map(move |(idx, v)| (idx / width, idx % width, v))
    }
}

/// Dense 3D voxel grid indexed (y, x, z), z fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid3<T> {
    ny: usize,
    nx: usize,
    nz: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid3<T> {
    pub fn filled(ny: usize, nx: usize, nz: usize, value: T) -> Self {
        Self {
            ny,
            nx,
            nz,
            data: vec![value; ny * nx * nz],
        }
    }
}

impl<T> Grid3<T> {
    #[inline]
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.ny, self.nx, self.nz)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, z: usize) -> &T {
        &self.data[(y * self.nx + x) * self.nz + z]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, z: usize, value: T) {
        self.data[(y * self.nx + x) * self.nz + z] = value;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

/// Extent and resolution of the BEV plane plus its channel count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BevGridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    /// Cell edge length in meters.
    pub cell: f64,
    /// Feature channels carried per cell.
    pub channels: usize,
}

impl BevGridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.x_max > self.x_min && self.y_max > self.y_min) {
            return Err(Error::config("BEV extent must have positive span"));
        }
        if self.cell.is_nan() || self.cell <= 0.0 {
            return Err(Error::config("BEV cell size must be positive"));
        }
        for (lo, hi, name) in [
            (self.x_min, self.x_max, "x"),
            (self.y_min, self.y_max, "y"),
        ] {
            let n = (hi - lo) / self.cell;
            if (n - n.round()).abs() > 1e-6 {
                return Err(Error::config(format!(
                    "BEV {name} span {} is not an integer multiple of cell {}",
                    hi - lo,
                    self.cell
                )));
            }
        }
        Ok(())
    }

    /// Number of rows (y axis).
    pub fn height(&self) -> usize {
        ((self.y_max - self.y_min) / self.cell).round() as usize
    }

    /// Number of columns (x axis).
    pub fn width(&self) -> usize {
        ((self.x_max - self.x_min) / self.cell).round() as usize
    }

    /// Cell index for a world (x, y) position; None when out of range.
    pub fn cell_index(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if x < self.x_min || y < self.y_min {
            return None;
        }
        let ix = ((x - self.x_min) / self.cell).floor() as usize;
        let iy = ((y - self.y_min) / self.cell).floor() as usize;
        if ix >= self.width() || iy >= self.height() {
            return None;
        }
        Some((iy, ix))
    }

    /// World coordinates of a cell center.
    pub fn cell_center(&self, iy: usize, ix: usize) -> (f64, f64) {
        (
            self.x_min + (ix as f64 + 0.5) * self.cell,
            self.y_min + (iy as f64 + 0.5) * self.cell,
        )
    }
}

/// C×H×W feature plane shared by the camera, LiDAR, and fused BEV branches.
///
/// Layout: index = (channel * height + row) * width + col.
#[derive(Debug, Clone, PartialEq)]
pub struct BevFeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl BevFeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::dim(format!(
                "feature data length {} does not match {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
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

    #[inline]
    pub fn same_dims(&self, other: &BevFeatureMap) -> bool {
        self.channels == other.channels
            && self.height == other.height
            && self.width == other.width
    }

    #[inline]
    pub fn same_plane(&self, other: &BevFeatureMap) -> bool {
        self.height == other.height && self.width == other.width
    }

    #[inline]
    pub fn at(&self, c: usize, row: usize, col: usize) -> f64 {
        self.data[(c * self.height + row) * self.width + col]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, row: usize, col: usize) -> &mut f64 {
        &mut self.data[(c * self.height + row) * self.width + col]
    }

    /// Feature vector at one position, channel order.
    pub fn feature(&self, row: usize, col: usize) -> Vec<f64> {
        (0..self.channels).map(|c| self.at(c, row, col)). collect()
    }

    /// Adds `vec * scale` into the cell's feature vector.
    pub fn add_scaled(&mut self, row: usize, col: usize, vec: &[f64], scale: f64) {
        debug_assert_eq!(vec.len(), self.channels);
        for (c, v) in vec.iter().enumerate() {
            self.data[(c * self.height + row) * self.width + col] += v * scale;
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Per-channel sum over all cells.
    pub fn channel_sums(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        (0..self.channels)
            .map(|c| crate::numeric::pairwise_sum(&self.data[c * plane..(c + 1) * plane]))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid2_roundtrip_indexing() {
        let mut g = Grid2::filled(3, 4, 0i32);
        g.set(2, 3, 7);
        g.set(0, 1, -1);
        assert_eq!(*g.get(2, 3), 7);
        assert_eq!(*g.get(0, 1), -1);
        assert_eq!(g.data()[2 * 4 + 3], 7);
    }

    #[test]
    fn grid2_from_vec_rejects_bad_len() {
        assert!(Grid2::from_vec(2, 2, vec![1, 2, 3]).is_err());
    }

    #[test]
    fn bev_spec_occ3d_defaults() {
        let spec = BevGridSpec {
            x_min: -40.0,
            x_max: 40.0,
            y_min: -40.0,
            y_max: 40.0,
            cell: 0.4,
            channels: 1,
        };
        spec.validate().unwrap();
        assert_eq!(spec.height(), 200);
        assert_eq!(spec.width(), 200);
    }

    #[test]
    fn bev_cell_index_half_open() {
        let spec = BevGridSpec {
            x_min: -1.0,
            x_max: 1.0,
            y_min: -1.0,
            y_max: 1.0,
            cell: 0.5,
            channels: 1,
        };
        assert_eq!(spec.cell_index(-1.0, -1.0), Some((0, 0)));
        assert_eq!(spec.cell_index(0.999, 0.999), Some((3, 3)));
        assert_eq!(spec.cell_index(1.0, 0.0), None);
        assert_eq!(spec.cell_index(-1.0001, 0.0), None);
    }

    #[test]
    fn bev_feature_add_scaled() {
        let mut map = BevFeatureMap::zeros(2, 2, 2);
        map.add_scaled(1, 0, &[1.0, 2.0], 0.5);
        map.add_scaled(1, 0, &[1.0, 0.0], 1.0);
        assert_eq!(map.at(0, 1, 0), 1.5);
        assert_eq!(map.at(1, 1, 0), 1.0);
        assert_eq!(map.at(0, 0, 0), 0.0);
    }

    #[test]
    fn grid3_layout_z_fastest() {
        let mut g = Grid3::filled(2, 2, 3, 0u16);
        g.set(1, 0, 2, 9);
        assert_eq!(g.data()[8], 9); // (y*nx + x)*nz + z
    }
}
