//! Procedural desk-scale scenes: axis-aligned primitives ray-cast into LiDAR
//! clouds, camera semantic/depth renders, and ground-truth occupancy grids.
//!
//! Everything is deterministic in the scene seed, independent of thread count.

use nalgebra::{Point3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, LidarPoint};
use crate::grid::Grid2;
use crate::occupancy::{OccupancyGrid, VoxelGridSpec};
use crate::view_transform::{DepthMap, SemanticMask};

/// Ground slab: the top face sits at `z_top`, extending down by `thickness`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_top: f64,
    pub thickness: f64,
    pub class: u16,
}

/// Axis-aligned box primitive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub class: u16,
}

/// Spinning-LiDAR model: rays ordered ring-major, then azimuth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidarSpec {
    pub rings: usize,
    pub azimuth_step_deg: f64,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub max_range: f64,
    pub origin: [f64; 3],
    /// Gaussian range-noise sigma in meters; 0 disables noise.
    #[serde(default)]
    pub noise_sigma: f64,
}

/// Full scene description as stored in scene JSON files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub ground: Option<GroundSpec>,
    pub boxes: Vec<BoxSpec>,
    pub cameras: Vec<CameraModel>,
    pub lidar: LidarSpec,
}

/// Camera at `center` looking along +x, yawed toward +y by `yaw_deg`, with
/// image x to the right and image y down.
pub fn yawed_forward_camera(
    center: [f64; 3],
    yaw_deg: f64,
    intrinsics: crate::geometry::CameraIntrinsics,
) -> CameraModel {
    use nalgebra::Matrix3;
    let psi = yaw_deg.to_radians();
    let (s, c) = (psi.sin(), psi.cos());
    // Rows are the camera axes expressed in the world frame.
    let rotation = Matrix3::new(
        s, -c, 0.0, //
        0.0, 0.0, -1.0, //
        c, s, 0.0,
    );
    let center_v = Vector3::new(center[0], center[1], center[2]);
    let translation = -(rotation * center_v);
    CameraModel {
        intrinsics,
        extrinsics: crate::geometry::Extrinsics::new(rotation, translation)
            .expect("constructed rotation is orthonormal"),
    }
}

impl SceneSpec {
    /// The frozen desk-scale fixture scene: a one-voxel-thick ground slab and
    /// three boxes ahead of a two-camera rig, with a LiDAR dense enough that
    /// every camera-visible surface cell receives returns.
    ///
    /// Pairs with [`crate::pipeline::PipelineConfig::toy`] (a 20×20×8 grid over
    /// ±5 m). Box faces sit strictly inside voxels so rasterized surface
    /// points fall into the voxels their geometry occupies.
    pub fn toy_fixture(seed: u64) -> SceneSpec {
        let intr = crate::geometry::CameraIntrinsics::new(70.0, 70.0, 48.0, 36.0, 96, 72)
            .expect("valid intrinsics");
        SceneSpec {
            seed,
            ground: Some(GroundSpec {
                x_min: -5.0,
                x_max: 5.0,
                y_min: -5.0,
                y_max: 5.0,
                z_top: 0.3,
                thickness: 0.4,
                class: 1,
            }),
            boxes: vec![
                BoxSpec {
                    center: [2.0, 1.0, 1.025],
                    size: [0.8, 0.8, 0.95],
                    class: 2,
                },
                BoxSpec {
                    center: [1.5, -2.0, 0.825],
                    size: [0.8, 0.8, 0.55],
                    class: 3,
                },
                BoxSpec {
                    center: [3.5, -0.5, 1.225],
                    size: [0.8, 0.8, 1.35],
                    class: 4,
                },
            ],
            cameras: vec![
                yawed_forward_camera([0.0, 0.3, 1.2], 25.0, intr),
                yawed_forward_camera([0.0, -0.3, 1.2], -25.0, intr),
            ],
            lidar: LidarSpec {
                rings: 200,
                azimuth_step_deg: 0.5,
                elevation_min_deg: -80.0,
                elevation_max_deg: 8.0,
                max_range: 30.0,
                origin: [0.0, 0.0, 1.5],
                noise_sigma: 0.0,
            },
        }
    }
}

/// Resolved axis-aligned primitive with half-open containment [min, max).
#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub class: u16,
}

impl Primitive {
    pub fn contains(&self, p: &Point3<f64>) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] < self.max[a])
    }

    /// True when the point lies within `tol` of the primitive surface.
    pub fn on_surface(&self, p: &Point3<f64>, tol: f64) -> bool {
        let inside_expanded =
            (0..3).all(|a| p[a] >= self.min[a] - tol && p[a] <= self.max[a] + tol);
        let inside_shrunk = (0..3).all(|a| p[a] > self.min[a] + tol && p[a] < self.max[a] - tol);
        inside_expanded && !inside_shrunk
    }

    /// Slab-method ray intersection; returns the entry parameter when the ray
    /// hits from outside.
    pub fn ray_hit(&self, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let mut t_enter = f64::NEG_INFINITY;
        let mut t_exit = f64::INFINITY;
        for a in 0..3 {
            if dir[a].abs() < 1e-15 {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let t0 = (self.min[a] - origin[a]) / dir[a];
            let t1 = (self.max[a] - origin[a]) / dir[a];
            let (lo, hi) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
            t_enter = t_enter.max(lo);
            t_exit = t_exit.min(hi);
            if t_enter > t_exit {
                return None;
            }
        }
        (t_enter > 1e-9).then_some(t_enter)
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if let Some(g) = &self.ground {
            if !(g.x_max > g.x_min && g.y_max > g.y_min && g.thickness > 0.0) {
                return Err(Error::config("ground extent and thickness must be positive"));
            }
            if g.class == 0 {
                return Err(Error::config("ground class must be nonzero"));
            }
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if b.size.iter().any(|&s| s <= 0.0) {
                return Err(Error::config(format!("box {i} has non-positive size")));
            }
            if b.class == 0 {
                return Err(Error::config(format!("box {i} class must be nonzero")));
            }
        }
        if self.lidar.azimuth_step_deg <= 0.0 {
            return Err(Error::config("azimuth step must be positive"));
        }
        if self.lidar.max_range <= 0.0 {
            return Err(Error::config("max range must be positive"));
        }
        if self.lidar.elevation_max_deg < self.lidar.elevation_min_deg {
            return Err(Error::config("elevation range is inverted"));
        }
        for cam in &self.cameras {
            cam.intrinsics.validate()?;
        }
        Ok(())
    }

    /// Boxes in listed order, ground last; containment queries take the first
    /// match, so boxes shadow the ground where they overlap.
    pub fn primitives(&self) -> Vec<Primitive> {
        let mut prims: Vec<Primitive> = self
            .boxes
            .iter()
            .map(|b| Primitive {
                min: [
                    b.center[0] - b.size[0] / 2.0,
                    b.center[1] - b.size[1] / 2.0,
                    b.center[2] - b.size[2] / 2.0,
                ],
                max: [
                    b.center[0] + b.size[0] / 2.0,
                    b.center[1] + b.size[1] / 2.0,
                    b.center[2] + b.size[2] / 2.0,
                ],
                class: b.class,
            })
            .collect();
        if let Some(g) = &self.ground {
            prims.push(Primitive {
                min: [g.x_min, g.y_min, g.z_top - g.thickness],
                max: [g.x_max, g.y_max, g.z_top],
                class: g.class,
            });
        }
        prims
    }

    /// Total label ids used by this scene's occupancy grids: background 0,
    /// object classes, and the trailing empty class.
    pub fn class_count(&self) -> usize {
        let max_class = self
            .boxes
            .iter()
            .map(|b| b.class)
            .chain(self.ground.iter().map(|g| g.class))
            .max()
            .unwrap_or(0);
        max_class as usize + 2
    }

    fn ray_directions(&self) -> Vec<Vector3<f64>> {
        let l = &self.lidar;
        let az_count = (360.0 / l.azimuth_step_deg).floor() as usize;
        let mut dirs = Vec::with_capacity(l.rings * az_count);
        for ring in 0..l.rings {
            let el = if l.rings == 1 {
                (l.elevation_min_deg + l.elevation_max_deg) / 2.0
            } else {
                l.elevation_min_deg
                    + (l.elevation_max_deg - l.elevation_min_deg) * ring as f64
                        / (l.rings - 1) as f64
            };
            let el_rad = el.to_radians();
            for step in 0..az_count {
                let az = (step as f64 * l.azimuth_step_deg).to_radians();
                dirs.push(Vector3::new(
                    el_rad.cos() * az.cos(),
                    el_rad.cos() * az.sin(),
                    el_rad.sin(),
                ));
            }
        }
        dirs
    }
}

/// Casts every LiDAR ray against the scene and returns the nearest hit per
/// ray, ordered by ray index. Range noise, when enabled, is seeded per ray so
/// the output is identical at any thread count.
pub fn raycast_lidar(spec: &SceneSpec) -> Result<Vec<LidarPoint>> {
    spec.validate()?;
    let prims = spec.primitives();
    let origin = Point3::new(
        spec.lidar.origin[0],
        spec.lidar.origin[1],
        spec.lidar.origin[2],
    );
    let dirs = spec.ray_directions();
    let sigma = spec.lidar.noise_sigma;
    let hits: Vec<Option<LidarPoint>> = dirs
        .par_iter()
        .enumerate()
        .map(|(ray_idx, dir)| {
            let mut best: Option<(f64, u16)> = None;
            for prim in &prims {
                if let Some(t) = prim.ray_hit(&origin, dir) {
                    if t <= spec.lidar.max_range && best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, prim.class));
                    }
                }
            }
            best.map(|(t, class)| {
                let range = if sigma > 0.0 {
                    let mut rng = ChaCha8Rng::seed_from_u64(
                        spec.seed ^ (ray_idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                    );
                    let noise = Normal::new(0.0, sigma).expect("sigma > 0").sample(&mut rng);
                    t + noise
                } else {
                    t
                };
                LidarPoint {
                    position: origin + range * dir,
                    class,
                }
            })
        })
        .collect();
    Ok(hits.into_iter().flatten().collect())
}

/// Renders the per-pixel nearest-surface class and exact depth for a camera,
/// using the same intersection code as the LiDAR path. Background pixels get
/// class 0 and depth 0.
pub fn render_semantics_and_depth(
    spec: &SceneSpec,
    cam: &CameraModel,
) -> Result<(SemanticMask, DepthMap)> {
    spec.validate()?;
    let prims = spec.primitives();
    let k = &cam.intrinsics;
    let ex = &cam.extrinsics;
    let (h, w) = (k.height as usize, k.width as usize);
    let origin = ex.camera_center();
    let rot_t = ex.rotation().transpose();

    let pixels: Vec<(u16, f64)> = (0..h * w)
        .into_par_iter()
        .map(|idx| {
            let (row, col) = (idx / w, idx % w);
            // Camera-frame direction with unit z, so the ray parameter equals
            // the camera depth directly.
            let dir_cam = Vector3::new(
                (col as f64 + 0.5 - k.cx) / k.fx,
                (row as f64 + 0.5 - k.cy) / k.fy,
                1.0,
            );
            let dir = rot_t * dir_cam;
            let mut best: Option<(f64, u16)> = None;
            for prim in &prims {
                if let Some(t) = prim.ray_hit(&origin, &dir) {
                    if best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, prim.class));
                    }
                }
            }
            best.map_or((0u16, 0.0), |(t, class)| (class, t))
        })
        .collect();

    let mut mask = Grid2::filled(h, w, 0u16);
    let mut depth = Grid2::filled(h, w, 0.0);
    for (idx, (class, d)) in pixels.into_iter().enumerate() {
        mask.data_mut()[idx] = class;
        depth.data_mut()[idx] = d;
    }
    Ok((mask, depth))
}

/// Labels each voxel by the class of the primitive containing its center;
/// voxels containing nothing get the empty class.
pub fn ground_truth_occupancy(spec: &SceneSpec, grid: &VoxelGridSpec) -> Result<OccupancyGrid> {
    spec.validate()?;
    grid.validate()?;
    let prims = spec.primitives();
    let class_count = spec.class_count();
    let mut occ = OccupancyGrid::empty(class_count, grid.ny(), grid.nx(), grid.nz());
    for iy in 0..grid.ny() {
        for ix in 0..grid.nx() {
            for iz in 0..grid.nz() {
                let (x, y, z) = grid.voxel_center(iy, ix, iz);
                let center = Point3::new(x, y, z);
                if let Some(prim) = prims.iter().find(|p| p.contains(&center)) {
                    occ.set_label(iy, ix, iz, prim.class);
                }
            }
        }
    }
    Ok(occ)
}
