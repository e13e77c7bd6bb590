//! Damped Gauss–Newton iterations over a hand configuration.
//!
//! A problem supplies a stacked residual `r(q)` with Jacobian `J`, plus a
//! quadratic prior given by its diagonal Hessian `W` and gradient `W̃`. Each
//! step solves `(JᵀJ + W + λI)Δq = −Jᵀr − W̃`, and is accepted only if the
//! problem's energy strictly decreases.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::energy::PriorWeights;
use crate::error::{Error, Result};
use crate::handmodel::HandConfiguration;

/// Smallest damping kept after a successful step.
pub const LAMBDA_FLOOR: f64 = 1e-12;

/// Relative pivot below which the normal-equation matrix counts as singular.
const PIVOT_TOL: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmSettings {
    pub lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub max_inner_iters: usize,
    /// Stop once ‖Δq‖ falls below this.
    pub step_tol: f64,
    /// Stop once an accepted step lowers the energy by less than this fraction.
    pub energy_tol: f64,
    pub clamp_to_limits: bool,
}

impl Default for LmSettings {
    fn default() -> Self {
        Self {
            lambda_init: 1e-3,
            lambda_up: 10.0,
            lambda_down: 0.5,
            max_inner_iters: 50,
            step_tol: 1e-6,
            energy_tol: 1e-9,
            clamp_to_limits: true,
        }
    }
}

impl LmSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_init >= 0.0 && self.lambda_init.is_finite()) {
            return Err(Error::invalid("solver.lambda_init", "must be finite and ≥ 0"));
        }
        if !(self.lambda_up > 1.0 && self.lambda_up.is_finite()) {
            return Err(Error::invalid("solver.lambda_up", "must be > 1"));
        }
        if !(self.lambda_down > 0.0 && self.lambda_down < 1.0) {
            return Err(Error::invalid("solver.lambda_down", "must lie in (0, 1)"));
        }
        if self.max_inner_iters == 0 {
            return Err(Error::invalid("solver.max_inner_iters", "must be ≥ 1"));
        }
        if !(self.step_tol > 0.0) {
            return Err(Error::invalid("solver.step_tol", "must be > 0"));
        }
        if !(self.energy_tol > 0.0) {
            return Err(Error::invalid("solver.energy_tol", "must be > 0"));
        }
        Ok(())
    }
}

/// Shrinks the damping after an accepted step, grows it after a rejection.
pub fn lm_update(lambda: f64, accepted: bool, settings: &LmSettings) -> f64 {
    if accepted {
        (lambda * settings.lambda_down).max(LAMBDA_FLOOR)
    } else {
        // a zero initial damping would otherwise never grow
        (lambda * settings.lambda_up).max(LAMBDA_FLOOR)
    }
}

/// Solves `(JᵀJ + W_gen + W_vel + W_acc + λI)Δq = −Jᵀr − W̃`.
pub fn solve_normal_equations(
    jacobian: &DMatrix<f64>,
    residual: &DVector<f64>,
    weights: &PriorWeights,
    lambda: f64,
    prior_grad: &DVector<f64>,
) -> Result<DVector<f64>> {
    solve_damped(jacobian, residual, &weights.combined(), lambda, prior_grad)
}

/// Same system with the prior Hessian given directly as a diagonal.
pub fn solve_damped(
    jacobian: &DMatrix<f64>,
    residual: &DVector<f64>,
    prior_diag: &DVector<f64>,
    lambda: f64,
    prior_grad: &DVector<f64>,
) -> Result<DVector<f64>> {
    let dof = jacobian.ncols();
    if residual.len() != jacobian.nrows() {
        return Err(Error::Dimension {
            what: "residual vector",
            expected: jacobian.nrows(),
            actual: residual.len(),
        });
    }
    for (what, len) in [("prior diagonal", prior_diag.len()), ("prior gradient", prior_grad.len())] {
        if len != dof {
            return Err(Error::Dimension { what, expected: dof, actual: len });
        }
    }
    if !(lambda >= 0.0) {
        return Err(Error::invalid("lambda", format!("damping must be ≥ 0, got {lambda}")));
    }
    let mut a = jacobian.tr_mul(jacobian);
    for d in 0..dof {
        a[(d, d)] += prior_diag[d] + lambda;
    }
    let rhs = -(jacobian.tr_mul(residual)) - prior_grad;
    if !a.iter().chain(rhs.iter()).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("normal equations".into()));
    }
    if dof == 0 {
        return Ok(DVector::zeros(0));
    }
    let scale = a.diagonal().amax();
    if scale == 0.0 {
        return Err(Error::Singular);
    }
    let chol = a.clone().cholesky().ok_or(Error::Singular)?;
    let min_pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v * v));
    if min_pivot < PIVOT_TOL * scale {
        return Err(Error::Singular);
    }
    let mut x = chol.solve(&rhs);
    // one step of iterative refinement
    let r = &rhs - &a * &x;
    x += chol.solve(&r);
    Ok(x)
}

/// Residual, Jacobian and quadratic prior of a problem at one iterate.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub residuals: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    pub prior_diag: DVector<f64>,
    pub prior_grad: DVector<f64>,
}

pub trait LeastSquaresProblem {
    fn dof(&self) -> usize;

    /// The objective being minimized, evaluated from scratch at `q`.
    fn energy(&self, q: &HandConfiguration) -> Result<f64>;

    fn linearize(&self, q: &HandConfiguration) -> Result<Linearization>;

    /// Maps a candidate back into the feasible set (joint limits).
    fn project(&self, q: HandConfiguration) -> Result<HandConfiguration>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub energy_before: f64,
    pub energy_after: f64,
    pub lambda: f64,
    pub step_norm: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    StepTolerance,
    EnergyTolerance,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOutcome {
    pub q: HandConfiguration,
    pub initial_energy: f64,
    pub final_energy: f64,
    pub iterations: Vec<IterationRecord>,
    pub termination: Termination,
}

fn finite_energy(e: f64) -> Result<f64> {
    if e.is_finite() {
        Ok(e)
    } else {
        Err(Error::NonFinite("energy".into()))
    }
}

/// Runs damped Gauss–Newton from `q0` and returns the last accepted iterate.
pub fn minimize<P: LeastSquaresProblem + ?Sized>(
    problem: &P,
    q0: &HandConfiguration,
    settings: &LmSettings,
) -> Result<SolveOutcome> {
    settings.validate()?;
    if q0.len() != problem.dof() {
        return Err(Error::Dimension {
            what: "initial configuration",
            expected: problem.dof(),
            actual: q0.len(),
        });
    }
    let mut q = if settings.clamp_to_limits { problem.project(q0.clone())? } else { q0.clone() };
    let mut energy = finite_energy(problem.energy(&q)?)?;
    let initial_energy = energy;
    let mut lambda = settings.lambda_init;
    let mut iterations = Vec::new();
    let mut termination = Termination::MaxIterations;

    for iteration in 0..settings.max_inner_iters {
        let lin = problem.linearize(&q)?;
        let delta = solve_damped(&lin.jacobian, &lin.residuals, &lin.prior_diag, lambda, &lin.prior_grad)?;
        let mut candidate = HandConfiguration(&q.0 + &delta);
        if settings.clamp_to_limits {
            candidate = problem.project(candidate)?;
        }
        let step_norm = (&candidate.0 - &q.0).norm();
        if step_norm < settings.step_tol {
            termination = Termination::StepTolerance;
            break;
        }
        let candidate_energy = finite_energy(problem.energy(&candidate)?)?;
        let accepted = candidate_energy < energy;
        iterations.push(IterationRecord {
            iteration,
            energy_before: energy,
            energy_after: candidate_energy,
            lambda,
            step_norm,
            accepted,
        });
        lambda = lm_update(lambda, accepted, settings);
        if accepted {
            let decrease = (energy - candidate_energy) / energy.abs().max(f64::MIN_POSITIVE);
            q = candidate;
            energy = candidate_energy;
            if decrease < settings.energy_tol {
                termination = Termination::EnergyTolerance;
                break;
            }
        }
    }

    Ok(SolveOutcome {
        q,
        initial_energy,
        final_energy: energy,
        iterations,
        termination,
    })
}
