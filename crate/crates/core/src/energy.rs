//! Contact kernel, per-fingertip contact residuals, and the generative and
//! temporal prior energies of the per-frame refinement objective.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RigidTransform;
use crate::handmodel::{HandConfiguration, KinematicChain};
use crate::pointcloud::{Neighbor, NeighborIndex};

/// Parameters of the asymmetric contact penalty and of its residual Jacobian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContactKernelParams {
    /// Curvature of the outside (d ≥ 0) branch.
    pub alpha: f64,
    /// Stiffness of the inside (d < 0) branch.
    pub k: f64,
    pub lambda_c: f64,
    /// Regularizer in the residual Jacobian denominator `2√f + ε²`.
    pub epsilon: f64,
}

impl Default for ContactKernelParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            k: 1.0,
            lambda_c: 100.0,
            epsilon: 1e-8,
        }
    }
}

impl ContactKernelParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("k", self.k), ("lambda_c", self.lambda_c), ("epsilon", self.epsilon)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("kernel.{name}"), format!("must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// `f(d)`: `(α/2)d²` outside, `(α/k²)(e^{−kd} + kd − 1)` inside.
pub fn kernel(d: f64, params: &ContactKernelParams) -> f64 {
    let (a, k) = (params.alpha, params.k);
    if d >= 0.0 {
        0.5 * a * d * d
    } else {
        // exp_m1 keeps precision for small |kd|
        a / (k * k) * ((-k * d).exp_m1() + k * d)
    }
}

pub fn kernel_derivative(d: f64, params: &ContactKernelParams) -> f64 {
    let (a, k) = (params.alpha, params.k);
    if d >= 0.0 {
        a * d
    } else {
        -a / k * (-k * d).exp_m1()
    }
}

/// Penalty applied to the signed distance. The smoothed absolute value is
/// the comparison baseline used by the noise study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ContactPenalty {
    Asymmetric,
    SmoothAbs { delta: f64 },
}

impl Default for ContactPenalty {
    fn default() -> Self {
        ContactPenalty::Asymmetric
    }
}

impl ContactPenalty {
    pub const BASELINE_DELTA: f64 = 1e-6;

    pub fn baseline() -> Self {
        ContactPenalty::SmoothAbs {
            delta: Self::BASELINE_DELTA,
        }
    }

    pub fn value(&self, d: f64, params: &ContactKernelParams) -> f64 {
        match *self {
            ContactPenalty::Asymmetric => kernel(d, params),
            ContactPenalty::SmoothAbs { delta } => (d * d + delta * delta).sqrt() - delta,
        }
    }

    pub fn derivative(&self, d: f64, params: &ContactKernelParams) -> f64 {
        match *self {
            ContactPenalty::Asymmetric => kernel_derivative(d, params),
            ContactPenalty::SmoothAbs { delta } => d / (d * d + delta * delta).sqrt(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ContactPenalty::Asymmetric => "asymmetric",
            ContactPenalty::SmoothAbs { .. } => "smooth_abs",
        }
    }
}

/// Diagonal prior weights (each a diagonal SPD matrix given as its diagonal).
#[derive(Debug, Clone, PartialEq)]
pub struct PriorWeights {
    pub w_gen: DVector<f64>,
    pub w_vel: DVector<f64>,
    pub w_acc: DVector<f64>,
}

impl PriorWeights {
    pub fn uniform(dof: usize, w_gen: f64, w_vel: f64, w_acc: f64) -> Self {
        Self {
            w_gen: DVector::from_element(dof, w_gen),
            w_vel: DVector::from_element(dof, w_vel),
            w_acc: DVector::from_element(dof, w_acc),
        }
    }

    pub fn dof(&self) -> usize {
        self.w_gen.len()
    }

    pub fn validate(&self, dof: usize) -> Result<()> {
        for (name, w) in [("w_gen", &self.w_gen), ("w_vel", &self.w_vel), ("w_acc", &self.w_acc)] {
            if w.len() != dof {
                return Err(Error::Dimension {
                    what: "prior weight vector",
                    expected: dof,
                    actual: w.len(),
                });
            }
            if let Some(v) = w.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
                return Err(Error::invalid(format!("weights.{name}"), format!("entries must be finite and ≥ 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Diagonal of `W_gen + W_vel + W_acc`.
    pub fn combined(&self) -> DVector<f64> {
        &self.w_gen + &self.w_vel + &self.w_acc
    }
}

/// A frozen nearest-neighbor match for one fingertip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub index: usize,
}

impl From<Neighbor> for Correspondence {
    fn from(n: Neighbor) -> Self {
        Self {
            point: n.point,
            normal: n.normal,
            index: n.index,
        }
    }
}

/// Stacked contact residuals with their Jacobian and the underlying distances.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactResidual {
    pub residuals: DVector<f64>,
    /// F×D.
    pub jacobian: DMatrix<f64>,
    pub distances: DVector<f64>,
    pub correspondences: Vec<Correspondence>,
    /// `λ_c` the residuals were built with.
    pub lambda_c: f64,
}

fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::Dimension { what, expected, actual });
    }
    Ok(())
}

/// Fingertip positions expressed in the object frame.
pub fn object_frame_fingertips(
    q: &HandConfiguration,
    chain: &KinematicChain,
    t_tar: &RigidTransform,
) -> Result<Vec<Vector3<f64>>> {
    let inv = t_tar.inverse();
    Ok(chain.fingertip_positions(q)?.iter().map(|s| inv.apply(s)).collect())
}

/// Nearest cloud samples to each fingertip, in the object frame.
pub fn find_correspondences(
    q: &HandConfiguration,
    chain: &KinematicChain,
    index: &NeighborIndex,
    t_tar: &RigidTransform,
) -> Result<Vec<Correspondence>> {
    if index.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(object_frame_fingertips(q, chain, t_tar)?
        .iter()
        .map(|x| index.nearest(x).into())
        .collect())
}

/// Residuals and Jacobian rows with the given correspondences held fixed.
pub fn evaluate_contact(
    q: &HandConfiguration,
    chain: &KinematicChain,
    correspondences: &[Correspondence],
    t_tar: &RigidTransform,
    params: &ContactKernelParams,
    penalty: ContactPenalty,
) -> Result<ContactResidual> {
    check_len("correspondences", chain.fingertip_count(), correspondences.len())?;
    let (tips, jacs) = chain.fingertip_jacobians(q)?;
    let inv = t_tar.inverse();
    let r_t = t_tar.rotation().transpose();
    let f = tips.len();
    let mut residuals = DVector::zeros(f);
    let mut jacobian = DMatrix::zeros(f, chain.dof());
    let mut distances = DVector::zeros(f);
    let scale = (2.0 * params.lambda_c).sqrt();
    for (i, ((s, j_world), c)) in tips.iter().zip(&jacs).zip(correspondences).enumerate() {
        let x = inv.apply(s);
        let d = c.normal.dot(&(x - c.point));
        let fv = penalty.value(d, params);
        let dfv = penalty.derivative(d, params);
        distances[i] = d;
        residuals[i] = (2.0 * params.lambda_c * fv).sqrt();
        // ∂d/∂q = nᵀ Rᵀ J_world
        let dd_dq = (c.normal.transpose() * r_t) * j_world;
        let gain = scale * dfv / (2.0 * fv.sqrt() + params.epsilon * params.epsilon);
        jacobian.row_mut(i).copy_from(&(dd_dq * gain));
    }
    Ok(ContactResidual {
        residuals,
        jacobian,
        distances,
        correspondences: correspondences.to_vec(),
        lambda_c: params.lambda_c,
    })
}

/// Queries correspondences at `q`, then evaluates residuals with them frozen.
pub fn contact_residual(
    q: &HandConfiguration,
    chain: &KinematicChain,
    index: &NeighborIndex,
    t_tar: &RigidTransform,
    params: &ContactKernelParams,
) -> Result<ContactResidual> {
    contact_residual_with(q, chain, index, t_tar, params, ContactPenalty::Asymmetric)
}

pub fn contact_residual_with(
    q: &HandConfiguration,
    chain: &KinematicChain,
    index: &NeighborIndex,
    t_tar: &RigidTransform,
    params: &ContactKernelParams,
    penalty: ContactPenalty,
) -> Result<ContactResidual> {
    let corr = find_correspondences(q, chain, index, t_tar)?;
    evaluate_contact(q, chain, &corr, t_tar, params, penalty)
}

/// `½‖r‖²`.
pub fn contact_energy(residual: &ContactResidual) -> f64 {
    0.5 * residual.residuals.norm_squared()
}

/// `½ (q − q_gen)ᵀ W_gen (q − q_gen)`.
pub fn generative_energy(q: &HandConfiguration, q_gen: &HandConfiguration, w_gen: &DVector<f64>) -> Result<f64> {
    check_len("q_gen", q.len(), q_gen.len())?;
    check_len("w_gen", q.len(), w_gen.len())?;
    Ok(weighted_half_norm(&(&q.0 - &q_gen.0), w_gen))
}

/// `½‖q − q₁‖²_{W_vel} + ½‖(q − q₁) − (q₁ − q₂)‖²_{W_acc}`.
pub fn temporal_energy(
    q: &HandConfiguration,
    q_prev: &HandConfiguration,
    q_prev2: &HandConfiguration,
    w_vel: &DVector<f64>,
    w_acc: &DVector<f64>,
) -> Result<f64> {
    for (what, len) in [("q_prev", q_prev.len()), ("q_prev2", q_prev2.len()), ("w_vel", w_vel.len()), ("w_acc", w_acc.len())] {
        check_len(what, q.len(), len)?;
    }
    let vel = &q.0 - &q_prev.0;
    let acc = &vel - (&q_prev.0 - &q_prev2.0);
    Ok(weighted_half_norm(&vel, w_vel) + weighted_half_norm(&acc, w_acc))
}

fn weighted_half_norm(v: &DVector<f64>, w: &DVector<f64>) -> f64 {
    0.5 * v.iter().zip(w.iter()).map(|(x, w)| w * x * x).sum::<f64>()
}

/// Gradient of generative + temporal energy at `q`:
/// `W_gen(q − q_gen) + W_vel(q − q₁) + W_acc((q − q₁) − (q₁ − q₂))`.
pub fn prior_gradient(
    q: &HandConfiguration,
    q_gen: &HandConfiguration,
    q_prev: &HandConfiguration,
    q_prev2: &HandConfiguration,
    weights: &PriorWeights,
) -> Result<DVector<f64>> {
    for (what, len) in [("q_gen", q_gen.len()), ("q_prev", q_prev.len()), ("q_prev2", q_prev2.len())] {
        check_len(what, q.len(), len)?;
    }
    weights.validate(q.len())?;
    let vel = &q.0 - &q_prev.0;
    let acc = &vel - (&q_prev.0 - &q_prev2.0);
    Ok(weights.w_gen.component_mul(&(&q.0 - &q_gen.0)) + weights.w_vel.component_mul(&vel) + weights.w_acc.component_mul(&acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{clouds, models};
    use crate::pointcloud::OrientedPointCloud;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::E;

    fn unit() -> ContactKernelParams {
        ContactKernelParams {
            alpha: 1.0,
            k: 1.0,
            lambda_c: 1.0,
            epsilon: 1e-8,
        }
    }

    #[test]
    fn kernel_point_values() {
        let p = unit();
        assert_eq!(kernel(0.0, &p), 0.0);
        assert_eq!(kernel(-0.0, &p), 0.0);
        assert_eq!(kernel(1.0, &p), 0.5);
        assert!((kernel(-1.0, &p) - (E - 2.0)).abs() < 1e-12);
        assert_eq!(kernel_derivative(0.0, &p), 0.0);
        assert_eq!(kernel_derivative(-1e-300, &p), -1e-300);
        assert!((kernel_derivative(-1.0, &p) - (1.0 - E)).abs() < 1e-12);
    }

    #[test]
    fn kernel_derivative_matches_fd() {
        let p = unit();
        let h = 1e-5;
        for d in [0.3, -0.3, 1.7, -2.2] {
            let fd = (kernel(d + h, &p) - kernel(d - h, &p)) / (2.0 * h);
            assert!((fd - kernel_derivative(d, &p)).abs() < 1e-8, "d={d}");
        }
    }

    #[test]
    fn kernel_is_regular_at_zero() {
        let p = unit();
        for e in 2..=6 {
            let h = 10f64.powi(-e);
            assert!((kernel(h, &p) - kernel(-h, &p)).abs() <= h * h);
        }
        // one-sided second differences; truncation error is k·h on the inside
        let h = 1e-5;
        let plus = (kernel(2.0 * h, &p) - 2.0 * kernel(h, &p) + kernel(0.0, &p)) / (h * h);
        let minus = (kernel(-2.0 * h, &p) - 2.0 * kernel(-h, &p) + kernel(0.0, &p)) / (h * h);
        assert!((plus - 1.0).abs() < 1e-6, "{plus}");
        assert!((minus - 1.0).abs() < 1e-4, "{minus}");
        // convexity over [-1, 1]
        let h = 1e-3;
        for i in -100..=100 {
            let d = i as f64 / 100.0;
            let dd = (kernel(d + h, &p) - 2.0 * kernel(d, &p) + kernel(d - h, &p)) / (h * h);
            assert!(dd >= -1e-6, "f''({d}) = {dd}");
        }
    }

    #[test]
    fn energies_are_examples() {
        let q = HandConfiguration::from_slice(&[0.1, -0.2, 0.3]);
        let w1 = DVector::from_element(3, 1.0);
        assert_eq!(generative_energy(&q, &q, &w1).unwrap(), 0.0);
        let shifted = HandConfiguration::from_slice(&[1.1, -0.2, 0.3]);
        assert!((generative_energy(&shifted, &q, &w1).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(temporal_energy(&q, &q, &q, &w1, &w1).unwrap(), 0.0);
        let q1 = HandConfiguration::from_slice(&[0.2, -0.1, 0.4]);
        let q0 = HandConfiguration::from_slice(&[0.3, 0.0, 0.5]);
        let zero = DVector::zeros(3);
        assert!(temporal_energy(&q0, &q1, &q, &zero, &w1).unwrap().abs() < 1e-30);
        assert!(generative_energy(&q, &HandConfiguration::zeros(2), &w1).is_err());
        assert!(temporal_energy(&q, &q, &q, &w1, &DVector::zeros(2)).is_err());
    }

    #[test]
    fn energies_match_explicit_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut v = |n: usize| DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let q = HandConfiguration(v(6));
        let g = HandConfiguration(v(6));
        let p1 = HandConfiguration(v(6));
        let p2 = HandConfiguration(v(6));
        let w = PriorWeights {
            w_gen: v(6).abs(),
            w_vel: v(6).abs(),
            w_acc: v(6).abs(),
        };
        let mut gen = 0.0;
        let mut tmp = 0.0;
        for d in 0..6 {
            gen += 0.5 * w.w_gen[d] * (q[d] - g[d]).powi(2);
            tmp += 0.5 * w.w_vel[d] * (q[d] - p1[d]).powi(2);
            tmp += 0.5 * w.w_acc[d] * (q[d] - 2.0 * p1[d] + p2[d]).powi(2);
        }
        assert!((generative_energy(&q, &g, &w.w_gen).unwrap() - gen).abs() < 1e-14);
        assert!((temporal_energy(&q, &p1, &p2, &w.w_vel, &w.w_acc).unwrap() - tmp).abs() < 1e-14);

        let grad = prior_gradient(&q, &g, &p1, &p2, &w).unwrap();
        let total = |q: &HandConfiguration| {
            generative_energy(q, &g, &w.w_gen).unwrap() + temporal_energy(q, &p1, &p2, &w.w_vel, &w.w_acc).unwrap()
        };
        let h = 1e-6;
        for d in 0..6 {
            let mut a = q.clone();
            let mut b = q.clone();
            a.0[d] += h;
            b.0[d] -= h;
            let fd = (total(&a) - total(&b)) / (2.0 * h);
            assert!((fd - grad[d]).abs() < 1e-7, "d={d}: {fd} vs {}", grad[d]);
        }
    }

    #[test]
    fn prior_gradient_examples() {
        let q = HandConfiguration::from_slice(&[0.4, 0.1]);
        let w = PriorWeights::uniform(2, 2.0, 0.5, 0.25);
        assert_eq!(prior_gradient(&q, &q, &q, &q, &w).unwrap(), DVector::zeros(2));
        let g = HandConfiguration::from_slice(&[0.1, 0.3]);
        let only_gen = PriorWeights::uniform(2, 2.0, 0.0, 0.0);
        assert_eq!(
            prior_gradient(&q, &g, &q, &q, &only_gen).unwrap(),
            DVector::from_vec(vec![2.0 * (0.4 - 0.1), 2.0 * (0.1 - 0.3)])
        );
    }

    fn plane_cloud() -> OrientedPointCloud {
        let pts: Vec<Vector3<f64>> = (-20..=20)
            .flat_map(|i| (-20..=20).map(move |j| Vector3::new(i as f64 * 0.01, j as f64 * 0.01, 0.0)))
            .collect();
        let n = pts.len();
        OrientedPointCloud::new(pts, vec![Vector3::z(); n]).unwrap()
    }

    #[test]
    fn single_fingertip_residual_values() {
        // one-dof tip sits at (L, 0, 0); place the plane so that d = ±0.1
        let chain = models::one_dof();
        let idx = NeighborIndex::build(&plane_cloud()).unwrap();
        let q = HandConfiguration::zeros(1);
        let tip = chain.fingertip_positions(&q).unwrap()[0];
        for (d, expected) in [(0.0, 0.0), (0.1, 0.1), (-0.1, (2.0 * (0.1f64.exp() - 1.1)).sqrt())] {
            // object frame origin placed so the tip maps to (0, 0, d)
            let t_tar = RigidTransform::from_translation(tip - Vector3::new(0.0, 0.0, d));
            let r = contact_residual(&q, &chain, &idx, &t_tar, &unit()).unwrap();
            assert!((r.distances[0] - d).abs() < 1e-15);
            assert!((r.residuals[0] - expected).abs() < 1e-12, "d={d}: {}", r.residuals[0]);
            if d == 0.0 {
                assert_eq!(r.jacobian.amax(), 0.0);
            }
        }
        assert!((0.101695 - (2.0 * (0.1f64.exp() - 1.1)).sqrt()).abs() < 1e-6);
    }

    #[test]
    fn contact_energy_identity() {
        let r = ContactResidual {
            residuals: DVector::from_vec(vec![0.1, 0.2]),
            jacobian: DMatrix::zeros(2, 1),
            distances: DVector::zeros(2),
            correspondences: vec![],
            lambda_c: 1.0,
        };
        assert!((contact_energy(&r) - 0.025).abs() < 1e-15);

        let chain = models::gripper3();
        let cloud = clouds::unit_sphere(3000);
        let idx = NeighborIndex::build(&cloud).unwrap();
        let params = ContactKernelParams { lambda_c: 7.5, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let q = crate::fixtures::random_configuration(&chain, &mut rng);
            let t_tar = crate::fixtures::sphere_grasp_pose();
            let r = contact_residual(&q, &chain, &idx, &t_tar, &params).unwrap();
            let direct: f64 = params.lambda_c * r.distances.iter().map(|&d| kernel(d, &params)).sum::<f64>();
            assert!((contact_energy(&r) - direct).abs() <= 1e-12 * direct.max(1.0));
        }
    }

    #[test]
    fn bad_params_are_rejected() {
        assert!(ContactKernelParams { alpha: 0.0, ..Default::default() }.validate().is_err());
        assert!(ContactKernelParams::default().validate().is_ok());
    }
}
