//! Synthetic demo data: hands, clouds, grasps, keypoint arcs and pose
//! datasets, plus an on-disk fixture tree with a checksummed manifest.

pub mod clouds;
mod generate;
pub mod models;

pub use generate::{generate_fixtures, Expectation, FileEntry, FixtureEntry, Manifest, SINUSOID_CHUNK, SINUSOID_SHAPE};

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::RigidTransform;
use crate::handmodel::{HandConfiguration, HandTrajectory, KinematicChain};
use crate::refiner::{CanonicalGrasp, RefinementConfig};
use crate::retarget::{keypoints_from_configuration, KeypointFrame, RetargetSpec};

/// Uniform sample inside the joint box; unbounded joints use `[−π, π]`.
pub fn random_configuration<R: Rng + ?Sized>(chain: &KinematicChain, rng: &mut R) -> HandConfiguration {
    interior_configuration(chain, rng, 0.0)
}

/// Uniform sample with `margin` of each joint range trimmed from both ends.
pub fn interior_configuration<R: Rng + ?Sized>(chain: &KinematicChain, rng: &mut R, margin: f64) -> HandConfiguration {
    let lo = chain.lower_limits();
    let hi = chain.upper_limits();
    HandConfiguration(lo.zip_map(&hi, |l, h| {
        let (l, h) = (if l.is_finite() { l } else { -PI }, if h.is_finite() { h } else { PI });
        let pad = margin * (h - l);
        rng.random_range((l + pad)..=(h - pad))
    }))
}

/// Depth of the unit-sphere center below the gripper palm.
pub const SPHERE_DEPTH: f64 = 1.3;
const SPHERE_YAW: f64 = 0.4;
const GRASP_J1: f64 = 0.9;

/// Object pose of the unit sphere relative to [`models::gripper3`].
pub fn sphere_grasp_pose() -> RigidTransform {
    RigidTransform::trans(0.0, 0.0, -SPHERE_DEPTH).compose(&RigidTransform::rot_z(SPHERE_YAW))
}

fn gripper3_symmetric(j0: f64) -> HandConfiguration {
    HandConfiguration::from_slice(&[0.0, j0, GRASP_J1].repeat(3))
}

/// Sphere grasp with every fingertip `offset` meters outside the unit sphere.
pub fn sphere_grasp_frame(offset: f64) -> CanonicalGrasp {
    let chain = models::gripper3();
    let t_tar = sphere_grasp_pose();
    let inv = t_tar.inverse();
    let radius = |j0: f64| inv.apply(&chain.fingertip_positions(&gripper3_symmetric(j0)).unwrap()[0]).norm();
    let target = 1.0 + offset;
    // radius decreases monotonically as j0 swings the finger inward
    let (mut a, mut b) = (-1.2, -0.3);
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if radius(m) > target {
            a = m;
        } else {
            b = m;
        }
    }
    CanonicalGrasp {
        q_gen: gripper3_symmetric(0.5 * (a + b)),
        t_tar,
    }
}

/// Refinement settings used with the sphere grasp.
pub fn sphere_grasp_config() -> RefinementConfig {
    RefinementConfig::default()
}

/// A short generated trajectory hovering 4–6 mm outside the sphere.
pub fn sphere_grasp_trajectory(frames: usize) -> (HandTrajectory, Vec<RigidTransform>) {
    let qs = (0..frames)
        .map(|t| sphere_grasp_frame(0.005 + 0.001 * (t as f64 * 0.7).sin()).q_gen)
        .collect();
    (HandTrajectory::new(qs).expect("non-empty"), vec![sphere_grasp_pose(); frames])
}

/// Middle, distal and tip keypoints of [`models::hand20`].
pub fn hand20_retarget_spec() -> RetargetSpec {
    let links = models::hand20_keypoint_links();
    let refs: Vec<&str> = links.iter().map(String::as_str).collect();
    RetargetSpec::for_links(&refs)
}

/// Keypoints generated from a known joint path.
#[derive(Debug, Clone)]
pub struct KeypointArc {
    pub frames: Vec<KeypointFrame>,
    pub q_true: Vec<HandConfiguration>,
}

/// Keypoints traced by a smooth joint-space loop through the middle of the
/// joint box.
pub fn keypoint_arc(chain: &KinematicChain, spec: &RetargetSpec, frames: usize) -> KeypointArc {
    let lo = chain.lower_limits();
    let hi = chain.upper_limits();
    let mid = (&lo + &hi) * 0.5;
    let amp = (&hi - &lo) * 0.2;
    let q_true: Vec<HandConfiguration> = (0..frames)
        .map(|t| {
            let s = (2.0 * PI * t as f64 / frames as f64).sin();
            HandConfiguration(mid.zip_map(&amp, |m, a| m + a * s))
        })
        .collect();
    let frames = q_true
        .iter()
        .map(|q| KeypointFrame::new(keypoints_from_configuration(chain, spec, q).expect("spec matches chain")).unwrap())
        .collect();
    KeypointArc { frames, q_true }
}

/// Per-joint amplitude, frequency and phase offset of the sinusoid dataset.
fn sinusoid_value(d: usize, t: usize, phase: f64, gain: f64) -> f64 {
    let amp = 0.5 + 0.1 * d as f64;
    gain * amp * (0.3 * t as f64 + phase + 0.7 * d as f64).sin()
}

/// Sequences of sinusoidal joint motion: shared per-joint shape, random
/// per-sequence phase and gain.
pub fn sinusoid_sequences(seed: u64, sequences: usize, frames: usize, dof: usize) -> Vec<HandTrajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..sequences)
        .map(|_| {
            let phase = rng.random_range(0.0..2.0 * PI);
            let gain = rng.random_range(0.8..1.2);
            let qs = (0..frames)
                .map(|t| HandConfiguration::from_slice(&(0..dof).map(|d| sinusoid_value(d, t, phase, gain)).collect::<Vec<_>>()))
                .collect();
            HandTrajectory::new(qs).expect("frames > 0")
        })
        .collect()
}

/// The fixed per-frame joint map relating the two hands of
/// [`linear_pair`] (5×4, full column rank).
pub fn linear_pair_map() -> DMatrix<f64> {
    DMatrix::from_row_slice(
        5,
        4,
        &[
            0.9, 0.2, 0.0, 0.0, //
            -0.1, 1.1, 0.3, 0.0, //
            0.0, -0.2, 0.8, 0.1, //
            0.2, 0.0, 0.1, 1.2, //
            0.5, 0.5, -0.5, 0.5,
        ],
    )
}

/// Paired trajectories of a 4-dof reference hand and a 5-dof hand whose
/// every frame is `A · q_ref`.
pub fn linear_pair(seed: u64, sequences: usize, frames: usize) -> (Vec<HandTrajectory>, Vec<HandTrajectory>) {
    let reference = sinusoid_sequences(seed, sequences, frames, 4);
    let a = linear_pair_map();
    let new = reference
        .iter()
        .map(|tr| HandTrajectory::new(tr.frames().iter().map(|q| HandConfiguration(&a * &q.0)).collect()).unwrap())
        .collect();
    (reference, new)
}
