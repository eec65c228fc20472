//! Rigid-body transforms, pinhole projection, and back-projection between
//! LiDAR points and image pixels.

use nalgebra::{Matrix3, Point3, Unit, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points closer than this to the image plane are treated as behind the camera.
pub const MIN_PROJECTION_DEPTH: f64 = 1e-6;

/// Tolerance for the rotation-matrix orthonormality and determinant invariants.
pub const ROTATION_TOL: f64 = 1e-9;

/// Pinhole intrinsics (focal lengths and principal point in pixels).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::config("focal lengths must be positive"));
        }
        if !(0.0 <= self.cx && self.cx < self.width as f64) {
            return Err(Error::config("cx must lie in [0, width)"));
        }
        if !(0.0 <= self.cy && self.cy < self.height as f64) {
            return Err(Error::config("cy must lie in [0, height)"));
        }
        Ok(())
    }

    /// True when the continuous pixel coordinate falls inside [0,W)×[0,H).
    #[inline]
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64
    }
}

#[derive(Serialize, Deserialize, Clone)]
struct ExtrinsicsRepr {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

/// Sensor-to-camera rigid transform: p_cam = R · p + t.
///
/// The rotation is validated to be orthonormal with determinant +1; fields are
/// private so the invariant survives construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ExtrinsicsRepr", into = "ExtrinsicsRepr")]
pub struct Extrinsics {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl TryFrom<ExtrinsicsRepr> for Extrinsics {
    type Error = Error;

    fn try_from(repr: ExtrinsicsRepr) -> Result<Self> {
        let rotation = Matrix3::from_fn(|r, c| repr.rotation[r][c]);
        Extrinsics::new(rotation, Vector3::from_column_slice(&repr.translation))
    }
}

impl From<Extrinsics> for ExtrinsicsRepr {
    fn from(ex: Extrinsics) -> Self {
        let mut rotation = [[0.0; 3]; 3];
        for (r, row) in rotation.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = ex.rotation[(r, c)];
            }
        }
        ExtrinsicsRepr {
            rotation,
            translation: [ex.translation.x, ex.translation.y, ex.translation.z],
        }
    }
}

impl Extrinsics {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let residual = (rotation.transpose() * rotation - Matrix3::identity()).norm();
        if residual > ROTATION_TOL {
            return Err(Error::config(format!(
                "rotation is not orthonormal (residual {residual:.3e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::config(format!(
                "rotation determinant {det} is not +1"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Pure translation (identity rotation).
    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    #[inline]
    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    #[inline]
    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Applies the transform to a sensor-frame point.
    #[inline]
    pub fn transform(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// Inverse transform: camera frame back to sensor frame.
    #[inline]
    pub fn inverse_transform(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation.transpose() * (p.coords - self.translation))
    }

    /// Camera center expressed in the sensor frame.
    pub fn camera_center(&self) -> Point3<f64> {
        Point3::from(-(self.rotation.transpose() * self.translation))
    }

    /// self ∘ other: applies `other` first, then `self`.
    pub fn compose(&self, other: &Extrinsics) -> Extrinsics {
        Extrinsics {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

/// Continuous pixel coordinate paired with metric depth along the optical axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelDepth {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// A LiDAR return: sensor-frame position plus semantic class id.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub position: Point3<f64>,
    pub class: u16,
}

/// Full camera description as stored in scene files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: Extrinsics,
}

/// Projects a sensor-frame point into the image.
///
/// Returns `None` when the point is behind the camera (depth ≤ 1e-6 m) or the
/// pixel falls outside [0,W)×[0,H).
pub fn project(p: &Point3<f64>, ex: &Extrinsics, k: &CameraIntrinsics) -> Option<PixelDepth> {
    let cam = ex.rotation * p.coords + ex.translation;
    let z = cam.z;
    if z <= MIN_PROJECTION_DEPTH {
        return None;
    }
    let u = k.fx * cam.x / z + k.cx;
    let v = k.fy * cam.y / z + k.cy;
    if !k.contains(u, v) {
        return None;
    }
    Some(PixelDepth { u, v, depth: z })
}

/// Inverse of [`project`]: lifts a pixel with depth back to the sensor frame.
pub fn back_project(pd: &PixelDepth, ex: &Extrinsics, k: &CameraIntrinsics) -> Result<Point3<f64>> {
    if pd.depth.is_nan() || pd.depth <= 0.0 {
        return Err(Error::data(format!(
            "back_project requires positive depth, got {}",
            pd.depth
        )));
    }
    let cam = Vector3::new(
        (pd.u - k.cx) * pd.depth / k.fx,
        (pd.v - k.cy) * pd.depth / k.fy,
        pd.depth,
    );
    Ok(Point3::from(ex.rotation.transpose() * (cam - ex.translation)))
}

/// Composes `ex` with a random rigid perturbation: a uniformly random
/// unit-direction translation of magnitude `d_translation` meters and a
/// random-axis rotation of `d_rotation_deg` degrees. Deterministic in `seed`.
pub fn perturb_extrinsics(
    ex: &Extrinsics,
    d_translation: f64,
    d_rotation_deg: f64,
    seed: u64,
) -> Extrinsics {
    assert!(d_translation >= 0.0 && d_rotation_deg >= 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Draw order is fixed (translation direction, then rotation axis) so a
    // seed maps to the same perturbation direction at every magnitude.
    let dir: [f64; 3] = UnitSphere.sample(&mut rng);
    let axis: [f64; 3] = UnitSphere.sample(&mut rng);

    let translation = ex.translation + d_translation * Vector3::from_column_slice(&dir);
    let angle = d_rotation_deg.to_radians();
    let delta = nalgebra::Rotation3::from_axis_angle(
        &Unit::new_normalize(Vector3::from_column_slice(&axis)),
        angle,
    );
    Extrinsics {
        rotation: delta.into_inner() * ex.rotation,
        translation,
    }
}

/// Rotation angle in degrees recovered from the matrix trace.
pub fn rotation_angle_deg(rotation: &Matrix3<f64>) -> f64 {
    let c = ((rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix4;
    use proptest::prelude::*;
    use rand::Rng;

    fn rot_z(angle: f64) -> Matrix3<f64> {
        nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), angle).into_inner()
    }

    /// Brute-force homogeneous pipeline: Z·[u v 1]ᵀ = K₄·T₄·[x y z 1]ᵀ with
    /// explicit 4×4 matrices. Independent of the direct R·p + t path.
    fn project_homogeneous(
        p: &Point3<f64>,
        ex: &Extrinsics,
        k: &CameraIntrinsics,
    ) -> (f64, f64, f64) {
        let mut t4 = Matrix4::identity();
        for r in 0..3 {
            for c in 0..3 {
                t4[(r, c)] = ex.rotation()[(r, c)];
            }
            t4[(r, 3)] = ex.translation()[r];
        }
        let mut k4 = Matrix4::identity();
        k4[(0, 0)] = k.fx;
        k4[(1, 1)] = k.fy;
        k4[(0, 2)] = k.cx;
        k4[(1, 2)] = k.cy;
        let h = k4 * t4 * nalgebra::Vector4::new(p.x, p.y, p.z, 1.0);
        (h.x / h.z, h.y / h.z, h.z)
    }

    fn random_extrinsics(rng: &mut impl Rng) -> Extrinsics {
        let axis: [f64; 3] = UnitSphere.sample(rng);
        let angle = rng.random_range(-3.0..3.0);
        let rot = nalgebra::Rotation3::from_axis_angle(
            &Unit::new_normalize(Vector3::from_column_slice(&axis)),
            angle,
        );
        let t = Vector3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        );
        Extrinsics::new(rot.into_inner(), t).unwrap()
    }

    #[test]
    fn project_principal_ray() {
        let k = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 4, 4).unwrap();
        let pd = project(&Point3::new(0.0, 0.0, 1.0), &Extrinsics::identity(), &k).unwrap();
        assert_eq!((pd.u, pd.v, pd.depth), (0.0, 0.0, 1.0));
    }

    #[test]
    fn project_direct_substitution() {
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        let pd = project(&Point3::new(0.1, 0.2, 2.0), &Extrinsics::identity(), &k).unwrap();
        assert!((pd.u - 55.0).abs() < 1e-12);
        assert!((pd.v - 60.0).abs() < 1e-12);
        assert!((pd.depth - 2.0).abs() < 1e-12);
    }

    #[test]
    fn project_rejects_behind_camera_and_out_of_frame() {
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        let ex = Extrinsics::identity();
        assert!(project(&Point3::new(0.0, 0.0, -1.0), &ex, &k).is_none());
        assert!(project(&Point3::new(0.0, 0.0, 1e-9), &ex, &k).is_none());
        // u = 100*2/1 + 50 = 250, outside [0, 100)
        assert!(project(&Point3::new(2.0, 0.0, 1.0), &ex, &k).is_none());
    }

    #[test]
    fn project_matches_homogeneous_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = CameraIntrinsics::new(310.0, 305.0, 160.0, 120.0, 320, 240).unwrap();
        let mut checked = 0;
        while checked < 500 {
            let ex = random_extrinsics(&mut rng);
            let p = Point3::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            );
            if let Some(pd) = project(&p, &ex, &k) {
                let (u, v, z) = project_homogeneous(&p, &ex, &k);
                assert!((pd.u - u).abs() < 1e-9);
                assert!((pd.v - v).abs() < 1e-9);
                assert!((pd.depth - z).abs() < 1e-9);
                checked += 1;
            }
        }
    }

    #[test]
    fn back_project_principal_ray() {
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        let p = back_project(
            &PixelDepth {
                u: 50.0,
                v: 50.0,
                depth: 3.0,
            },
            &Extrinsics::identity(),
            &k,
        )
        .unwrap();
        assert!((p - Point3::new(0.0, 0.0, 3.0)).norm() < 1e-12);
    }

    #[test]
    fn back_project_inverse_of_example() {
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        let p = back_project(
            &PixelDepth {
                u: 55.0,
                v: 60.0,
                depth: 2.0,
            },
            &Extrinsics::identity(),
            &k,
        )
        .unwrap();
        assert!((p - Point3::new(0.1, 0.2, 2.0)).norm() < 1e-12);
    }

    #[test]
    fn back_project_rejects_non_positive_depth() {
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        let pd = PixelDepth {
            u: 10.0,
            v: 10.0,
            depth: 0.0,
        };
        assert!(back_project(&pd, &Extrinsics::identity(), &k).is_err());
    }

    #[test]
    fn round_trip_random_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k = CameraIntrinsics::new(280.0, 290.0, 161.5, 119.25, 320, 240).unwrap();
        let ex = random_extrinsics(&mut rng);
        let mut max_err: f64 = 0.0;
        for _ in 0..10_000 {
            let pd = PixelDepth {
                u: rng.random_range(0.0..320.0),
                v: rng.random_range(0.0..240.0),
                depth: rng.random_range(0.2..60.0),
            };
            let p = back_project(&pd, &ex, &k).unwrap();
            let rt = project(&p, &ex, &k).expect("round trip stays in frame");
            max_err = max_err
                .max((rt.u - pd.u).abs())
                .max((rt.v - pd.v).abs())
                .max((rt.depth - pd.depth).abs());
        }
        assert!(max_err < 1e-6, "round-trip max error {max_err}");
    }

    #[test]
    fn perturb_zero_magnitudes_is_identity() {
        let ex = Extrinsics::new(rot_z(0.3), Vector3::new(1.0, -2.0, 0.5)).unwrap();
        let p = perturb_extrinsics(&ex, 0.0, 0.0, 42);
        assert_eq!(p.rotation(), ex.rotation());
        assert_eq!(p.translation(), ex.translation());
    }

    #[test]
    fn perturb_translation_norm_exact() {
        let p = perturb_extrinsics(&Extrinsics::identity(), 0.1, 0.0, 9);
        assert!((p.translation().norm() - 0.1).abs() < 1e-12);
        assert_eq!(p.rotation(), &Matrix3::identity());
    }

    #[test]
    fn perturb_rotation_angle_from_trace() {
        let p = perturb_extrinsics(&Extrinsics::identity(), 0.0, 1.0, 9);
        assert!((rotation_angle_deg(p.rotation()) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn perturb_deterministic_in_seed() {
        let ex = Extrinsics::new(rot_z(-0.7), Vector3::new(0.2, 0.0, 1.0)).unwrap();
        let a = perturb_extrinsics(&ex, 0.05, 0.5, 123);
        let b = perturb_extrinsics(&ex, 0.05, 0.5, 123);
        let c = perturb_extrinsics(&ex, 0.05, 0.5, 124);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn extrinsics_serde_round_trip() {
        let ex = Extrinsics::new(rot_z(0.25), Vector3::new(0.1, 0.2, 0.3)).unwrap();
        let json = serde_json::to_string(&ex).unwrap();
        let back: Extrinsics = serde_json::from_str(&json).unwrap();
        assert_eq!(ex, back);
    }

    #[test]
    fn extrinsics_rejects_non_rotation() {
        let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0);
        assert!(Extrinsics::new(m, Vector3::zeros()).is_err());
        // Reflection: orthonormal but det = -1.
        let refl = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(Extrinsics::new(refl, Vector3::zeros()).is_err());
    }

    proptest! {
        /// Orthonormality is preserved under composition and perturbation.
        #[test]
        fn prop_orthonormality_preserved(seed in 0u64..4096) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_extrinsics(&mut rng);
            let b = random_extrinsics(&mut rng);
            let composed = a.compose(&b);
            let perturbed = perturb_extrinsics(&composed, 0.1, 1.0, seed);
            for ex in [&composed, &perturbed] {
                let r = ex.rotation();
                let residual = (r.transpose() * r - Matrix3::identity()).norm();
                prop_assert!(residual < 1e-9);
                prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
            }
        }

        /// project ∘ back_project is the identity on its domain.
        #[test]
        fn prop_project_back_project_identity(
            u in 0.0..319.0f64,
            v in 0.0..239.0f64,
            depth in 0.1..80.0f64,
            seed in 0u64..256,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ex = random_extrinsics(&mut rng);
            let k = CameraIntrinsics::new(300.0, 300.0, 160.0, 120.0, 320, 240).unwrap();
            let pd = PixelDepth { u, v, depth };
            let p = back_project(&pd, &ex, &k).unwrap();
            let rt = project(&p, &ex, &k).unwrap();
            prop_assert!((rt.u - u).abs() < 1e-6);
            prop_assert!((rt.v - v).abs() < 1e-6);
            prop_assert!((rt.depth - depth).abs() < 1e-6);
        }
    }
}
