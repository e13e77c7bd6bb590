//! Trajectory error and distribution metrics.
//!
//! Positions are meters internally; MPJPE and FPL are reported in
//! millimeters and FOL in degrees. Features for FID and diversity come from
//! a hand's codebook encoder: the mean of the quantized latents over all
//! chunk windows of a sequence.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::codebook::{quantize, Codebook, MorphologyNets};
use crate::error::{Error, Result};
use crate::geometry::{orthonormal_drift, RigidTransform, TargetPoseTrajectory};
use crate::handmodel::{HandTrajectory, KinematicChain};

/// Allowed deviation of a rotation input from orthonormality.
pub const ROTATION_TOL: f64 = 1e-6;

/// Per-frame joint positions (meters).
#[derive(Debug, Clone, PartialEq)]
pub struct JointTrajectory {
    frames: Vec<Vec<Vector3<f64>>>,
}

impl JointTrajectory {
    pub fn new(frames: Vec<Vec<Vector3<f64>>>) -> Result<Self> {
        let j = frames.first().map(Vec::len).ok_or_else(|| Error::invalid("joint trajectory", "no frames"))?;
        if j == 0 {
            return Err(Error::invalid("joint trajectory", "no joints"));
        }
        if let Some(f) = frames.iter().find(|f| f.len() != j) {
            return Err(Error::Dimension {
                what: "joints per frame",
                expected: j,
                actual: f.len(),
            });
        }
        Ok(Self { frames })
    }

    /// World positions of every link origin, with the hand root placed by
    /// `roots` (identity when absent).
    pub fn from_configurations(chain: &KinematicChain, traj: &HandTrajectory, roots: Option<&TargetPoseTrajectory>) -> Result<Self> {
        check_roots(traj, roots)?;
        let frames = traj
            .frames()
            .iter()
            .enumerate()
            .map(|(t, q)| {
                let root = roots.map_or(RigidTransform::identity(), |r| r.frames()[t]);
                Ok(chain.forward_kinematics(q)?.poses().iter().map(|p| root.apply(p.translation())).collect())
            })
            .collect::<Result<_>>()?;
        Self::new(frames)
    }

    pub fn frames(&self) -> &[Vec<Vector3<f64>>] {
        &self.frames
    }

    pub fn joint_count(&self) -> usize {
        self.frames[0].len()
    }
}

fn check_roots(traj: &HandTrajectory, roots: Option<&TargetPoseTrajectory>) -> Result<()> {
    match roots {
        Some(r) if r.len() != traj.len() => Err(Error::Dimension {
            what: "root pose frames",
            expected: traj.len(),
            actual: r.len(),
        }),
        _ => Ok(()),
    }
}

/// World pose of the palm link at the last frame.
pub fn final_palm_pose(chain: &KinematicChain, traj: &HandTrajectory, roots: Option<&TargetPoseTrajectory>) -> Result<RigidTransform> {
    check_roots(traj, roots)?;
    let last = traj.len() - 1;
    let root = roots.map_or(RigidTransform::identity(), |r| r.frames()[last]);
    let fk = chain.forward_kinematics(&traj.frames()[last])?;
    Ok(root.compose(&fk.poses()[chain.palm_link_index()]))
}

/// Mean joint position error over frames and joints, in millimeters.
pub fn mpjpe(pred: &JointTrajectory, gt: &JointTrajectory) -> Result<f64> {
    if pred.frames.len() != gt.frames.len() {
        return Err(Error::Dimension {
            what: "trajectory frames",
            expected: gt.frames.len(),
            actual: pred.frames.len(),
        });
    }
    if pred.joint_count() != gt.joint_count() {
        return Err(Error::Dimension {
            what: "joints per frame",
            expected: gt.joint_count(),
            actual: pred.joint_count(),
        });
    }
    let sum: f64 = pred
        .frames
        .iter()
        .zip(&gt.frames)
        .flat_map(|(p, g)| p.iter().zip(g).map(|(a, b)| (a - b).norm()))
        .sum();
    Ok(1000.0 * sum / (pred.frames.len() * pred.joint_count()) as f64)
}

fn mean(values: impl IntoIterator<Item = Result<f64>>) -> Result<f64> {
    let mut s = 0.0;
    let mut n = 0usize;
    for v in values {
        s += v?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid("metric", "no sequences"));
    }
    Ok(s / n as f64)
}

/// Mean of per-sequence MPJPE.
pub fn mpjpe_set(pairs: &[(JointTrajectory, JointTrajectory)]) -> Result<f64> {
    mean(pairs.iter().map(|(p, g)| mpjpe(p, g)))
}

/// Final placement error in millimeters.
pub fn fpl(pred_final_center: &Vector3<f64>, gt_final_center: &Vector3<f64>) -> f64 {
    1000.0 * (pred_final_center - gt_final_center).norm()
}

pub fn fpl_set(pairs: &[(Vector3<f64>, Vector3<f64>)]) -> Result<f64> {
    mean(pairs.iter().map(|(p, g)| Ok(fpl(p, g))))
}

/// Geodesic angle between two rotations, in degrees.
pub fn fol(pred: &Matrix3<f64>, gt: &Matrix3<f64>) -> Result<f64> {
    for (name, r) in [("predicted rotation", pred), ("ground-truth rotation", gt)] {
        let drift = orthonormal_drift(r);
        if drift > ROTATION_TOL {
            return Err(Error::invalid(name, format!("not orthonormal (drift {drift:e})")));
        }
    }
    let c = (((pred.transpose() * gt).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    Ok(c.acos().to_degrees())
}

pub fn fol_set(pairs: &[(Matrix3<f64>, Matrix3<f64>)]) -> Result<f64> {
    mean(pairs.iter().map(|(p, g)| fol(p, g)))
}

/// Mean quantized latent over the sequence's chunk windows.
pub fn extract_features(seq: &HandTrajectory, nets: &MorphologyNets, codebook: &Codebook) -> Result<DVector<f64>> {
    let chunks = nets.chunk.chunks(seq)?;
    if chunks.is_empty() {
        return Err(Error::InsufficientPoints {
            needed: nets.chunk.window,
            got: seq.len(),
        });
    }
    let mut acc = DVector::zeros(codebook.d_z());
    for x in &chunks {
        let c = quantize(codebook, nets.encoder.forward(x)?.as_slice())?;
        acc += codebook.code_vector(c);
    }
    Ok(acc / chunks.len() as f64)
}

/// `M` feature vectors of common width.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    rows: Vec<DVector<f64>>,
}

impl FeatureSet {
    pub fn new(rows: Vec<DVector<f64>>) -> Result<Self> {
        let d = rows.first().map(|r| r.len()).ok_or_else(|| Error::invalid("features", "empty feature set"))?;
        if let Some(r) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::Dimension {
                what: "feature width",
                expected: d,
                actual: r.len(),
            });
        }
        if rows.iter().any(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("features".into()));
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[DVector<f64>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }

    fn need_two(&self) -> Result<()> {
        if self.rows.len() < 2 {
            return Err(Error::InsufficientPoints { needed: 2, got: self.rows.len() });
        }
        Ok(())
    }

    pub fn mean(&self) -> DVector<f64> {
        self.rows.iter().fold(DVector::zeros(self.dim()), |a, r| a + r) / self.rows.len() as f64
    }

    /// Covariance with the `M − 1` normalization.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mu = self.mean();
        let d = self.dim();
        let mut c = DMatrix::zeros(d, d);
        for r in &self.rows {
            let x = r - &mu;
            c.ger(1.0, &x, &x, 1.0);
        }
        c / (self.rows.len() - 1) as f64
    }
}

/// Eigendecomposition-based square root of a symmetric PSD matrix with
/// negative eigenvalues clamped to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let s = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose()
}

fn trace_sqrt(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum()
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fid(real: &FeatureSet, gen: &FeatureSet) -> Result<f64> {
    real.need_two()?;
    gen.need_two()?;
    if real.dim() != gen.dim() {
        return Err(Error::Dimension {
            what: "feature width",
            expected: real.dim(),
            actual: gen.dim(),
        });
    }
    let (mu_r, mu_g) = (real.mean(), gen.mean());
    let (s_r, s_g) = (real.covariance(), gen.covariance());
    let root_r = psd_sqrt(&s_r);
    let cross = trace_sqrt(&(&root_r * &s_g * &root_r));
    let value = (mu_r - mu_g).norm_squared() + s_r.trace() + s_g.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}

/// Mean pairwise distance between feature vectors.
pub fn diversity(features: &FeatureSet) -> Result<f64> {
    features.need_two()?;
    let m = features.len();
    let mut sum = 0.0;
    for a in 0..m {
        for b in a + 1..m {
            sum += (&features.rows[a] - &features.rows[b]).norm();
        }
    }
    Ok(2.0 * sum / (m * (m - 1)) as f64)
}

/// Aggregate metrics over a set of sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub sequences: usize,
    pub mpjpe_mm: f64,
    pub fpl_mm: f64,
    pub fol_deg: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fid: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diversity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diversity_reference: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diversity_gap: Option<f64>,
}
