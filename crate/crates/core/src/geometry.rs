//! Rigid-body transforms and object pose trajectories.
//!
//! Rotations are kept as 3×3 matrices. Every constructor that accepts a raw
//! matrix projects it back onto SO(3) when its drift from orthonormality
//! exceeds [`ORTHONORMAL_TOL`], so downstream code may rely on `RᵀR = I`.

use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Drift of `‖RᵀR − I‖_F` above which a rotation is re-orthonormalized.
pub const ORTHONORMAL_TOL: f64 = 1e-9;

/// Largest drift accepted from external input before it is rejected outright.
pub const INPUT_ROTATION_TOL: f64 = 1e-4;

/// A proper rigid transform `x ↦ R·x + p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 16]", into = "[f64; 16]")]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn trans(x: f64, y: f64, z: f64) -> Self {
        Self::from_translation(Vector3::new(x, y, z))
    }

    /// Rotation of `angle` radians about `axis` (need not be normalized), no translation.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let rotation = Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle);
        Self {
            rotation: *rotation.matrix(),
            translation: Vector3::zeros(),
        }
    }

    pub fn rot_x(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::x(), angle)
    }

    pub fn rot_y(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::y(), angle)
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::z(), angle)
    }

    /// Builds a transform from a rotation matrix and translation.
    ///
    /// Matrices within [`INPUT_ROTATION_TOL`] of SO(3) are projected onto it;
    /// anything further away (or with negative determinant) is rejected.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("rigid transform".into()));
        }
        let drift = orthonormal_drift(&rotation);
        if drift > INPUT_ROTATION_TOL || rotation.determinant() <= 0.0 {
            return Err(Error::invalid(
                "rotation",
                format!("not a proper rotation (‖RᵀR − I‖ = {drift:.3e})"),
            ));
        }
        let rotation = if drift > ORTHONORMAL_TOL {
            project_to_rotation(&rotation)
        } else {
            rotation
        };
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Parses a row-major homogeneous 4×4 matrix.
    pub fn from_row_major(values: &[f64]) -> Result<Self> {
        if values.len() != 16 {
            return Err(Error::Dimension {
                what: "row-major 4x4 transform",
                expected: 16,
                actual: values.len(),
            });
        }
        let m = Matrix4::from_row_slice(values);
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if (bottom[0].abs() + bottom[1].abs() + bottom[2].abs() + (bottom[3] - 1.0).abs()) > 1e-9 {
            return Err(Error::invalid(
                "transform",
                format!("bottom row must be [0 0 0 1], got {bottom:?}"),
            ));
        }
        let rotation = m.fixed_view::<3, 3>(0, 0).into_owned();
        let translation = m.fixed_view::<3, 1>(0, 3).into_owned();
        Self::new(rotation, translation)
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let m = self.to_homogeneous();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = m[(r, c)];
            }
        }
        out
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let mut rotation = self.rotation * other.rotation;
        if orthonormal_drift(&rotation) > ORTHONORMAL_TOL {
            rotation = project_to_rotation(&rotation);
        }
        RigidTransform {
            rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `R·x + p`.
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// `R·v`, for directions.
    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }
}

impl TryFrom<[f64; 16]> for RigidTransform {
    type Error = Error;

    fn try_from(values: [f64; 16]) -> Result<Self> {
        Self::from_row_major(&values)
    }
}

impl From<RigidTransform> for [f64; 16] {
    fn from(t: RigidTransform) -> Self {
        t.to_row_major()
    }
}

/// `‖RᵀR − I‖_F`.
pub fn orthonormal_drift(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).norm()
}

/// Nearest proper rotation in Frobenius norm (polar factor with det fixed to +1).
pub fn project_to_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u requested");
    let v_t = svd.v_t.expect("svd v_t requested");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    r
}

/// Per-frame rigid poses of the manipulated object.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetPoseTrajectory {
    frames: Vec<RigidTransform>,
    /// Hz. Informational only.
    pub frame_rate: f64,
}

impl TargetPoseTrajectory {
    pub fn new(frames: Vec<RigidTransform>, frame_rate: f64) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::invalid("pose trajectory", "no frames"));
        }
        Ok(Self { frames, frame_rate })
    }

    pub fn constant(pose: RigidTransform, len: usize, frame_rate: f64) -> Result<Self> {
        Self::new(vec![pose; len], frame_rate)
    }

    pub fn frames(&self) -> &[RigidTransform] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn get(&self, t: usize) -> Option<&RigidTransform> {
        self.frames.get(t)
    }
}

/// Converts camera-frame object poses into world-frame targets given the
/// world-to-camera extrinsics: `T_world(t) = extrinsics⁻¹ ∘ T_cam(t)`.
pub fn to_world_trajectory(
    extrinsics: &RigidTransform,
    camera_poses: &TargetPoseTrajectory,
) -> TargetPoseTrajectory {
    let inv = extrinsics.inverse();
    TargetPoseTrajectory {
        frames: camera_poses.frames.iter().map(|t| inv.compose(t)).collect(),
        frame_rate: camera_poses.frame_rate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx_eq::*;
    use std::f64::consts::FRAC_PI_2;

    mod approx_eq {
        use nalgebra::{Matrix4, Vector3};

        pub fn mat4_close(a: &Matrix4<f64>, b: &Matrix4<f64>, tol: f64) -> bool {
            (a - b).amax() <= tol
        }

        pub fn vec3_close(a: &Vector3<f64>, b: &Vector3<f64>, tol: f64) -> bool {
            (a - b).amax() <= tol
        }
    }

    fn random_transform(seed: u64) -> RigidTransform {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let angle = rng.random_range(-3.0..3.0);
        let mut t = RigidTransform::from_axis_angle(&axis, angle);
        t.translation = Vector3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        );
        t
    }

    #[test]
    fn compose_examples() {
        let t = random_transform(1);
        assert_eq!(RigidTransform::identity().compose(&t), t);
        let c = RigidTransform::trans(1.0, 0.0, 0.0).compose(&RigidTransform::trans(0.0, 2.0, 0.0));
        assert_eq!(c, RigidTransform::trans(1.0, 2.0, 0.0));
        let r = RigidTransform::rot_z(FRAC_PI_2).compose(&RigidTransform::rot_z(FRAC_PI_2));
        assert!(mat4_close(
            &r.to_homogeneous(),
            &RigidTransform::rot_z(std::f64::consts::PI).to_homogeneous(),
            1e-12
        ));
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(RigidTransform::identity().inverse(), RigidTransform::identity());
        assert_eq!(
            RigidTransform::trans(1.0, 2.0, 3.0).inverse(),
            RigidTransform::trans(-1.0, -2.0, -3.0)
        );
        for seed in 0..20 {
            let t = random_transform(seed);
            // direct 4x4 inversion as oracle
            let oracle = t.to_homogeneous().try_inverse().unwrap();
            assert!(mat4_close(&t.inverse().to_homogeneous(), &oracle, 1e-9));
            assert!(mat4_close(
                &t.compose(&t.inverse()).to_homogeneous(),
                &Matrix4::identity(),
                1e-9
            ));
        }
    }

    #[test]
    fn apply_examples() {
        let x = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(RigidTransform::identity().apply(&x), x);
        assert!(vec3_close(
            &RigidTransform::rot_z(FRAC_PI_2).apply(&Vector3::x()),
            &Vector3::y(),
            1e-15
        ));
        for seed in 0..20 {
            let t = random_transform(seed);
            let h = t.to_homogeneous() * x.push(1.0);
            assert!(vec3_close(&t.apply(&x), &h.xyz(), 1e-12));
        }
    }

    #[test]
    fn world_trajectory_examples() {
        let cam = TargetPoseTrajectory::new(
            vec![RigidTransform::trans(1.0, 1.0, 1.0), random_transform(3)],
            30.0,
        )
        .unwrap();
        assert_eq!(to_world_trajectory(&RigidTransform::identity(), &cam), cam);

        let ext = RigidTransform::trans(0.5, -1.0, 2.0);
        let single = TargetPoseTrajectory::new(vec![RigidTransform::trans(1.0, 1.0, 1.0)], 30.0).unwrap();
        let out = to_world_trajectory(&ext, &single);
        assert_eq!(*out.frames()[0].translation(), Vector3::new(0.5, 2.0, -1.0));

        let ext = random_transform(9);
        let out = to_world_trajectory(&ext, &cam);
        for (o, c) in out.frames().iter().zip(cam.frames()) {
            let oracle = ext.to_homogeneous().try_inverse().unwrap() * c.to_homogeneous();
            assert!(mat4_close(&o.to_homogeneous(), &oracle, 1e-9));
        }
    }

    #[test]
    fn row_major_round_trip_and_rejections() {
        let t = random_transform(4);
        let back = RigidTransform::from_row_major(&t.to_row_major()).unwrap();
        assert!(mat4_close(&back.to_homogeneous(), &t.to_homogeneous(), 1e-15));

        let mut bad = RigidTransform::identity().to_row_major();
        bad[0] = 2.0;
        assert!(RigidTransform::from_row_major(&bad).is_err());
        let mut reflect = RigidTransform::identity().to_row_major();
        reflect[0] = -1.0;
        assert!(RigidTransform::from_row_major(&reflect).is_err());
        assert!(RigidTransform::from_row_major(&[0.0; 15]).is_err());
    }

    #[test]
    fn slightly_perturbed_rotation_is_projected() {
        let mut m = *RigidTransform::rot_z(0.3).rotation();
        m[(0, 1)] += 1e-6;
        let t = RigidTransform::new(m, Vector3::zeros()).unwrap();
        assert!(orthonormal_drift(t.rotation()) <= ORTHONORMAL_TOL);
        assert!((t.rotation().determinant() - 1.0).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn transform() -> impl Strategy<Value = RigidTransform> {
            (any::<u64>()).prop_map(random_transform)
        }

        proptest! {
            #[test]
            fn compose_is_associative(a in transform(), b in transform(), c in transform()) {
                let l = a.compose(&b).compose(&c);
                let r = a.compose(&b.compose(&c));
                prop_assert!(mat4_close(&l.to_homogeneous(), &r.to_homogeneous(), 1e-9));
            }

            #[test]
            fn apply_respects_composition(a in transform(), b in transform(),
                                          x in prop::array::uniform3(-5.0f64..5.0)) {
                let x = Vector3::from(x);
                prop_assert!(vec3_close(&a.compose(&b).apply(&x), &a.apply(&b.apply(&x)), 1e-9));
            }

            #[test]
            fn double_inverse_is_identity(t in transform()) {
                prop_assert!(mat4_close(&t.inverse().inverse().to_homogeneous(), &t.to_homogeneous(), 1e-9));
            }
        }
    }
}
