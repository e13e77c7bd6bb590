//! Keypoint-driven inverse kinematics onto a target chain.
//!
//! Each frame minimizes `½ Σ_k w_k ‖f_k(q) − t_k‖² + ½ λ_smooth ‖q − q_prev‖²`
//! over the joint box, where `f_k` is the world position of a chain link.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RigidTransform;
use crate::handmodel::{HandConfiguration, HandTrajectory, KinematicChain};
use crate::solver::{minimize, LeastSquaresProblem, Linearization, LmSettings, SolveOutcome};

/// Default weight of a fingertip keypoint.
pub const TIP_WEIGHT: f64 = 1.0;
/// Default weight of an intermediate phalange keypoint.
pub const PHALANGE_WEIGHT: f64 = 0.5;

fn one() -> f64 {
    1.0
}

/// Maps source keypoint `keypoint` onto the origin of chain link `link`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointCorrespondence {
    pub link: String,
    pub keypoint: usize,
    /// Defaults to the tip or phalange weight depending on `link`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
    /// Scale about the alignment origin applied after alignment.
    #[serde(default = "one")]
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetargetSpec {
    pub correspondences: Vec<KeypointCorrespondence>,
    /// Source-to-device frame change.
    #[serde(default)]
    pub device_alignment: RigidTransform,
    #[serde(default)]
    pub lambda_smooth: f64,
}

impl RetargetSpec {
    /// One unit-scale correspondence per link, keypoint `k` driving `links[k]`.
    pub fn for_links(links: &[&str]) -> Self {
        Self {
            correspondences: links
                .iter()
                .enumerate()
                .map(|(k, l)| KeypointCorrespondence {
                    link: l.to_string(),
                    keypoint: k,
                    weight: None,
                    scale: 1.0,
                })
                .collect(),
            device_alignment: RigidTransform::identity(),
            lambda_smooth: 0.0,
        }
    }

    pub fn validate(&self, chain: &KinematicChain) -> Result<()> {
        if self.correspondences.is_empty() {
            return Err(Error::invalid("correspondences", "at least one correspondence is required"));
        }
        if !(self.lambda_smooth >= 0.0 && self.lambda_smooth.is_finite()) {
            return Err(Error::invalid("lambda_smooth", "must be finite and ≥ 0"));
        }
        for c in &self.correspondences {
            if chain.link_index(&c.link).is_none() {
                return Err(Error::UnknownLink(c.link.clone()));
            }
            if let Some(w) = c.weight {
                if !(w >= 0.0 && w.is_finite()) {
                    return Err(Error::invalid("correspondences.weight", format!("link {}: must be finite and ≥ 0", c.link)));
                }
            }
            if !(c.scale.is_finite() && c.scale > 0.0) {
                return Err(Error::invalid("correspondences.scale", format!("link {}: must be finite and > 0", c.link)));
            }
        }
        Ok(())
    }

    /// Resolved weights, filling defaults from the chain's fingertip list.
    pub fn weights(&self, chain: &KinematicChain) -> Vec<f64> {
        self.correspondences
            .iter()
            .map(|c| {
                c.weight.unwrap_or_else(|| {
                    if chain.fingertip_links().contains(&c.link) {
                        TIP_WEIGHT
                    } else {
                        PHALANGE_WEIGHT
                    }
                })
            })
            .collect()
    }

    fn max_keypoint(&self) -> usize {
        self.correspondences.iter().map(|c| c.keypoint).max().unwrap_or(0)
    }
}

/// Source keypoint positions for one frame (meters).
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointFrame {
    pub positions: Vec<Vector3<f64>>,
}

impl KeypointFrame {
    pub fn new(positions: Vec<Vector3<f64>>) -> Result<Self> {
        if positions.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite("keypoint position".into()));
        }
        Ok(Self { positions })
    }
}

/// Targets in the device frame, one per correspondence.
pub fn align_targets(frame: &KeypointFrame, spec: &RetargetSpec) -> Result<Vec<Vector3<f64>>> {
    if spec.max_keypoint() >= frame.positions.len() {
        return Err(Error::Dimension {
            what: "keypoints per frame",
            expected: spec.max_keypoint() + 1,
            actual: frame.positions.len(),
        });
    }
    let origin = spec.device_alignment.translation();
    Ok(spec
        .correspondences
        .iter()
        .map(|c| {
            let y = spec.device_alignment.apply(&frame.positions[c.keypoint]);
            origin + (y - origin) * c.scale
        })
        .collect())
}

struct IkProblem<'a> {
    chain: &'a KinematicChain,
    links: Vec<usize>,
    sqrt_w: Vec<f64>,
    targets: &'a [Vector3<f64>],
    q_prev: &'a HandConfiguration,
    lambda_smooth: f64,
}

impl IkProblem<'_> {
    fn residuals(&self, q: &HandConfiguration) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let fk = self.chain.forward_kinematics(q)?;
        let n = self.links.len();
        let mut r = DVector::zeros(3 * n);
        let mut jac = DMatrix::zeros(3 * n, self.chain.dof());
        for (k, &l) in self.links.iter().enumerate() {
            let p = fk.poses()[l].translation();
            let sw = self.sqrt_w[k];
            r.fixed_rows_mut::<3>(3 * k).copy_from(&((p - self.targets[k]) * sw));
            jac.rows_mut(3 * k, 3).copy_from(&(self.chain.link_jacobian(&fk, l) * sw));
        }
        Ok((r, jac))
    }
}

impl LeastSquaresProblem for IkProblem<'_> {
    fn dof(&self) -> usize {
        self.chain.dof()
    }

    fn energy(&self, q: &HandConfiguration) -> Result<f64> {
        let (r, _) = self.residuals(q)?;
        Ok(0.5 * r.norm_squared() + 0.5 * self.lambda_smooth * (&q.0 - &self.q_prev.0).norm_squared())
    }

    fn linearize(&self, q: &HandConfiguration) -> Result<Linearization> {
        let (residuals, jacobian) = self.residuals(q)?;
        Ok(Linearization {
            residuals,
            jacobian,
            prior_diag: DVector::from_element(self.chain.dof(), self.lambda_smooth),
            prior_grad: (&q.0 - &self.q_prev.0) * self.lambda_smooth,
        })
    }

    fn project(&self, q: HandConfiguration) -> Result<HandConfiguration> {
        self.chain.clamp_to_limits(&q)
    }
}

/// Solves one frame starting from `q_prev`.
pub fn retarget_frame_detailed(
    targets: &[Vector3<f64>],
    q_prev: &HandConfiguration,
    chain: &KinematicChain,
    spec: &RetargetSpec,
    solver: &LmSettings,
) -> Result<SolveOutcome> {
    spec.validate(chain)?;
    if targets.len() != spec.correspondences.len() {
        return Err(Error::Dimension {
            what: "retarget targets",
            expected: spec.correspondences.len(),
            actual: targets.len(),
        });
    }
    if q_prev.len() != chain.dof() {
        return Err(Error::Dimension {
            what: "q_prev",
            expected: chain.dof(),
            actual: q_prev.len(),
        });
    }
    let problem = IkProblem {
        chain,
        links: spec
            .correspondences
            .iter()
            .map(|c| chain.link_index(&c.link).expect("validated"))
            .collect(),
        sqrt_w: spec.weights(chain).into_iter().map(f64::sqrt).collect(),
        targets,
        q_prev,
        lambda_smooth: spec.lambda_smooth,
    };
    minimize(&problem, q_prev, solver)
}

pub fn retarget_frame(
    targets: &[Vector3<f64>],
    q_prev: &HandConfiguration,
    chain: &KinematicChain,
    spec: &RetargetSpec,
    solver: &LmSettings,
) -> Result<HandConfiguration> {
    retarget_frame_detailed(targets, q_prev, chain, spec, solver).map(|o| o.q)
}

/// Retargets every frame, seeding each with the previous solution.
pub fn retarget_sequence(
    keypoints: &[KeypointFrame],
    chain: &KinematicChain,
    spec: &RetargetSpec,
    solver: &LmSettings,
    q_init: &HandConfiguration,
) -> Result<HandTrajectory> {
    if keypoints.is_empty() {
        return Err(Error::invalid("keypoints", "trajectory has no frames"));
    }
    let mut prev = q_init.clone();
    let mut out = Vec::with_capacity(keypoints.len());
    for frame in keypoints {
        let targets = align_targets(frame, spec)?;
        let q = retarget_frame(&targets, &prev, chain, spec, solver)?;
        prev = q.clone();
        out.push(q);
    }
    HandTrajectory::new(out)
}

/// World positions of the spec's links at `q`, usable as exact targets.
pub fn keypoints_from_configuration(
    chain: &KinematicChain,
    spec: &RetargetSpec,
    q: &HandConfiguration,
) -> Result<Vec<Vector3<f64>>> {
    let fk = chain.forward_kinematics(q)?;
    spec.correspondences
        .iter()
        .map(|c| fk.get(&c.link).map(|p| *p.translation()).ok_or_else(|| Error::UnknownLink(c.link.clone())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{self, models};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hand_spec() -> RetargetSpec {
        fixtures::hand20_retarget_spec()
    }

    #[test]
    fn alignment_examples() {
        let frame = KeypointFrame::new(vec![Vector3::new(0.1, 0.0, 0.0)]).unwrap();
        let mut spec = RetargetSpec::for_links(&["tip"]);
        assert_eq!(align_targets(&frame, &spec).unwrap()[0], frame.positions[0]);
        spec.correspondences[0].scale = 1.2;
        assert!((align_targets(&frame, &spec).unwrap()[0] - Vector3::new(0.12, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn alignment_matches_homogeneous_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let t = RigidTransform::from_axis_angle(&axis, rng.random_range(-3.0..3.0))
                .compose(&RigidTransform::trans(rng.random(), rng.random(), rng.random()));
            let s: f64 = rng.random_range(0.5..2.0);
            let x = Vector3::new(rng.random(), rng.random(), rng.random());
            let mut spec = RetargetSpec::for_links(&["tip"]);
            spec.device_alignment = t;
            spec.correspondences[0].scale = s;
            // scale about the alignment origin as a 4×4 product: T_o · S · T_o⁻¹ · T
            let h = t.to_homogeneous();
            let o = t.translation();
            let mut scale = nalgebra::Matrix4::identity() * s;
            scale[(3, 3)] = 1.0;
            let about = nalgebra::Matrix4::new_translation(o) * scale * nalgebra::Matrix4::new_translation(&-o);
            let expected = (about * h * x.push(1.0)).xyz();
            let got = align_targets(&KeypointFrame::new(vec![x]).unwrap(), &spec).unwrap()[0];
            assert!((got - expected).norm() < 1e-12);
        }
    }

    #[test]
    fn missing_keypoint_is_an_error() {
        let spec = RetargetSpec::for_links(&["a", "b"]);
        assert!(align_targets(&KeypointFrame::new(vec![Vector3::zeros()]).unwrap(), &spec).is_err());
    }

    #[test]
    fn recovers_known_configuration() {
        let chain = models::hand20();
        let spec = hand_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let q_star = fixtures::interior_configuration(&chain, &mut rng, 0.15);
            let targets = keypoints_from_configuration(&chain, &spec, &q_star).unwrap();
            let noisy = HandConfiguration(q_star.0.map(|v| v + rng.random_range(-0.05..0.05)));
            let out = retarget_frame_detailed(&targets, &noisy, &chain, &spec, &LmSettings::default()).unwrap();
            let err = (&out.q.0 - &q_star.0).amax();
            assert!(err < 1e-3, "joint error {err}");
            let kp = keypoints_from_configuration(&chain, &spec, &out.q).unwrap();
            let kerr = kp.iter().zip(&targets).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            assert!(kerr <= 1e-4, "keypoint error {kerr}");
        }
    }

    #[test]
    fn heavy_smoothing_returns_previous() {
        let chain = models::hand20();
        let mut spec = hand_spec();
        spec.lambda_smooth = 1e9;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q_prev = fixtures::interior_configuration(&chain, &mut rng, 0.1);
        let q_star = fixtures::interior_configuration(&chain, &mut rng, 0.1);
        let targets = keypoints_from_configuration(&chain, &spec, &q_star).unwrap();
        let settings = LmSettings::default();
        let q = retarget_frame(&targets, &q_prev, &chain, &spec, &settings).unwrap();
        assert!((&q.0 - &q_prev.0).norm() <= settings.step_tol);
    }

    #[test]
    fn unreachable_target_stays_in_limits() {
        let chain = models::planar_two_link();
        let spec = RetargetSpec::for_links(&["tip"]);
        let q = retarget_frame_detailed(
            &[Vector3::new(5.0, 0.0, 0.0)],
            &HandConfiguration::from_slice(&[0.3, 0.3]),
            &chain,
            &spec,
            &LmSettings::default(),
        )
        .unwrap();
        assert!(chain.within_limits(&q.q));
        assert!(q.final_energy > 0.0);
        assert!(q.final_energy <= q.initial_energy);
    }

    #[test]
    fn objective_never_increases() {
        let chain = models::hand20();
        let mut spec = hand_spec();
        spec.lambda_smooth = 0.01;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let q_prev = fixtures::random_configuration(&chain, &mut rng);
            let targets: Vec<_> = (0..spec.correspondences.len())
                .map(|_| Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)))
                .collect();
            let out = retarget_frame_detailed(&targets, &q_prev, &chain, &spec, &LmSettings::default()).unwrap();
            assert!(out.final_energy <= out.initial_energy);
            assert!(chain.within_limits(&out.q));
        }
    }

    #[test]
    fn sequence_contracts() {
        let chain = models::hand20();
        let spec = hand_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q_star = fixtures::interior_configuration(&chain, &mut rng, 0.15);
        let frame = KeypointFrame::new(keypoints_from_configuration(&chain, &spec, &q_star).unwrap()).unwrap();
        let q0 = HandConfiguration::zeros(chain.dof());
        let settings = LmSettings::default();

        let single = retarget_sequence(std::slice::from_ref(&frame), &chain, &spec, &settings, &q0).unwrap();
        let direct = retarget_frame(&align_targets(&frame, &spec).unwrap(), &q0, &chain, &spec, &settings).unwrap();
        assert_eq!(single.frames()[0], direct);

        let constant = retarget_sequence(&vec![frame; 4], &chain, &spec, &settings, &q0).unwrap();
        assert_eq!(constant.len(), 4);
        for f in &constant.frames()[1..] {
            assert!((&f.0 - &constant.frames()[0].0).amax() <= settings.step_tol);
        }
        assert!(retarget_sequence(&[], &chain, &spec, &settings, &q0).is_err());
    }

    #[test]
    fn smooth_arc_has_bounded_joint_speed() {
        let chain = models::hand20();
        let spec = hand_spec();
        let traj = fixtures::keypoint_arc(&chain, &spec, 60);
        let q0 = traj.q_true[0].clone();
        let out = retarget_sequence(&traj.frames, &chain, &spec, &LmSettings::default(), &q0).unwrap();
        let speed = traj
            .frames
            .windows(2)
            .map(|w| w[0].positions.iter().zip(&w[1].positions).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        let bound = speed / fixtures::models::HAND20_MIN_LINK + 1e-3;
        let joint = out
            .frames()
            .windows(2)
            .map(|w| (&w[1].0 - &w[0].0).amax())
            .fold(0.0, f64::max);
        assert!(joint <= bound, "{joint} > {bound}");
    }

    #[test]
    fn spec_validation() {
        let chain = models::gripper3();
        let spec = RetargetSpec::for_links(&["nowhere"]);
        assert!(matches!(spec.validate(&chain), Err(Error::UnknownLink(_))));
        let empty = RetargetSpec { correspondences: vec![], ..RetargetSpec::for_links(&[]) };
        assert!(empty.validate(&chain).is_err());
    }
}
