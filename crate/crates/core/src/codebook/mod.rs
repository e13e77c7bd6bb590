//! Shared vector-quantized codebook over pose chunks.
//!
//! Each hand has an MLP encoder mapping a flattened chunk of `W` frames to a
//! latent `z_e`, which is snapped to its nearest code `e_c`. A per-hand
//! decoder maps codes back to chunks. Hands that share the codebook can be
//! translated into one another through the token index.

mod archive;
mod kmeans;
mod masking;
mod net;
mod train;

pub use archive::{CodebookArchive, MorphologyNets, ARCHIVE_VERSION};
pub use kmeans::kmeans;
pub use masking::{mask_ratio_schedule, mask_sequence, MaskedToken};
pub use net::{Activation, CoderNet, Layer, NetCache, NetGrad};
pub use train::{
    reconstruction_mse, ste_encoder_gradient, ste_surrogate_loss, train_new_morphology, train_reference,
    ArchConfig, EpochRecord, NewMorphology, RefreshRecord, TrainConfig, TrainedModel,
};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::handmodel::{HandConfiguration, HandTrajectory};

/// `K` codes of width `d_z`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CodebookRepr", into = "CodebookRepr")]
pub struct Codebook {
    k: usize,
    d_z: usize,
    codes: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CodebookRepr {
    k: usize,
    d_z: usize,
    codes: Vec<f64>,
}

impl TryFrom<CodebookRepr> for Codebook {
    type Error = Error;

    fn try_from(r: CodebookRepr) -> Result<Self> {
        Codebook::from_rows(r.k, r.d_z, r.codes)
    }
}

impl From<Codebook> for CodebookRepr {
    fn from(c: Codebook) -> Self {
        CodebookRepr {
            k: c.k,
            d_z: c.d_z,
            codes: c.codes,
        }
    }
}

impl Codebook {
    pub fn from_rows(k: usize, d_z: usize, codes: Vec<f64>) -> Result<Self> {
        if k == 0 || d_z == 0 {
            return Err(Error::invalid("codebook", "K and d_z must be ≥ 1"));
        }
        if codes.len() != k * d_z {
            return Err(Error::Dimension {
                what: "codebook entries",
                expected: k * d_z,
                actual: codes.len(),
            });
        }
        if codes.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("codebook".into()));
        }
        Ok(Self { k, d_z, codes })
    }

    pub fn from_vectors(codes: &[DVector<f64>]) -> Result<Self> {
        let d_z = codes.first().map_or(0, |c| c.len());
        if codes.iter().any(|c| c.len() != d_z) {
            return Err(Error::invalid("codebook", "codes differ in width"));
        }
        Self::from_rows(codes.len(), d_z, codes.iter().flat_map(|c| c.iter().copied()).collect())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d_z(&self) -> usize {
        self.d_z
    }

    pub fn code(&self, c: usize) -> &[f64] {
        &self.codes[c * self.d_z..(c + 1) * self.d_z]
    }

    pub fn code_vector(&self, c: usize) -> DVector<f64> {
        DVector::from_column_slice(self.code(c))
    }

    pub(crate) fn code_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.codes[c * self.d_z..(c + 1) * self.d_z]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.codes
    }

    fn check_latent(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.d_z {
            return Err(Error::Dimension {
                what: "latent",
                expected: self.d_z,
                actual: z.len(),
            });
        }
        Ok(())
    }
}

/// Index of the nearest code; ties go to the lowest index.
pub fn quantize(codebook: &Codebook, z_e: &[f64]) -> Result<usize> {
    codebook.check_latent(z_e)?;
    let mut best = (f64::INFINITY, 0);
    for (c, code) in codebook.codes.chunks_exact(codebook.d_z).enumerate() {
        let d: f64 = code.iter().zip(z_e).map(|(e, z)| (z - e) * (z - e)).sum();
        if d < best.0 {
            best = (d, c);
        }
    }
    Ok(best.1)
}

/// Per-code quantization counts for one epoch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageTable {
    pub counts: Vec<u64>,
}

impl UsageTable {
    pub fn zeros(k: usize) -> Self {
        Self { counts: vec![0; k] }
    }

    pub fn record(&mut self, c: usize) -> Result<()> {
        let len = self.counts.len();
        *self.counts.get_mut(c).ok_or(Error::OutOfRange { index: c, len })? += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn active(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }
}

pub fn usage_counts(indices: &[usize], k: usize) -> Result<UsageTable> {
    let mut t = UsageTable::zeros(k);
    for &c in indices {
        t.record(c)?;
    }
    Ok(t)
}

/// Codes used fewer than `tau_c` times, ascending.
pub fn cold_set(usage: &UsageTable, tau_c: f64) -> Vec<usize> {
    usage
        .counts
        .iter()
        .enumerate()
        .filter(|(_, &n)| (n as f64) < tau_c)
        .map(|(k, _)| k)
        .collect()
}

/// Scalar VQ loss terms. The first trains codes only, the second the
/// encoder only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VqLosses {
    pub codebook: f64,
    pub commitment: f64,
}

/// Gradients of the VQ terms after stop-gradient routing.
#[derive(Debug, Clone, PartialEq)]
pub struct VqGradients {
    /// ∂/∂e_c of the codebook term.
    pub code: DVector<f64>,
    /// ∂/∂z_e of the commitment term.
    pub encoder: DVector<f64>,
}

fn same_len(what: &'static str, a: &DVector<f64>, b: &DVector<f64>) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            what,
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(())
}

pub fn vq_losses(z_e: &DVector<f64>, z_q: &DVector<f64>, beta: f64) -> Result<VqLosses> {
    same_len("quantized latent", z_e, z_q)?;
    let sq = (z_e - z_q).norm_squared();
    Ok(VqLosses {
        codebook: sq,
        commitment: beta * sq,
    })
}

pub fn vq_gradients(z_e: &DVector<f64>, z_q: &DVector<f64>, beta: f64) -> Result<VqGradients> {
    same_len("quantized latent", z_e, z_q)?;
    Ok(VqGradients {
        code: (z_q - z_e) * 2.0,
        encoder: (z_e - z_q) * (2.0 * beta),
    })
}

/// `‖z_new − z_ref‖²`; only the new encoder receives its gradient.
pub fn distill_loss(z_new: &DVector<f64>, z_ref: &DVector<f64>) -> Result<f64> {
    same_len("reference latent", z_new, z_ref)?;
    Ok((z_new - z_ref).norm_squared())
}

/// Window and stride of the chunks a sequence is cut into. Chunks are
/// flattened frame by frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseChunkSpec {
    pub window: usize,
    pub stride: usize,
    pub dof: usize,
}

impl PoseChunkSpec {
    pub fn new(window: usize, stride: usize, dof: usize) -> Result<Self> {
        let s = Self { window, stride, dof };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.stride == 0 || self.dof == 0 {
            return Err(Error::invalid("chunk", "window, stride and dof must be ≥ 1"));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.window * self.dof
    }

    /// `(frames − W)/stride + 1`, or 0 when the sequence is shorter than `W`.
    pub fn chunk_count(&self, frames: usize) -> usize {
        if frames < self.window {
            0
        } else {
            (frames - self.window) / self.stride + 1
        }
    }

    pub fn chunks(&self, seq: &HandTrajectory) -> Result<Vec<DVector<f64>>> {
        if seq.dof() != self.dof {
            return Err(Error::Dimension {
                what: "chunk dof",
                expected: self.dof,
                actual: seq.dof(),
            });
        }
        Ok((0..self.chunk_count(seq.len()))
            .map(|i| {
                let start = i * self.stride;
                DVector::from_iterator(
                    self.width(),
                    seq.frames()[start..start + self.window].iter().flat_map(|q| q.as_slice().iter().copied()),
                )
            })
            .collect())
    }

    /// Inverse of [`chunks`](Self::chunks): overlapping frames are averaged.
    /// The result covers `(n − 1)·stride + W` frames.
    pub fn assemble(&self, chunks: &[DVector<f64>]) -> Result<HandTrajectory> {
        if chunks.is_empty() {
            return Err(Error::invalid("chunks", "nothing to assemble"));
        }
        if let Some(c) = chunks.iter().find(|c| c.len() != self.width()) {
            return Err(Error::Dimension {
                what: "chunk width",
                expected: self.width(),
                actual: c.len(),
            });
        }
        let frames = (chunks.len() - 1) * self.stride + self.window;
        let mut sum = vec![DVector::zeros(self.dof); frames];
        let mut hits = vec![0usize; frames];
        for (i, c) in chunks.iter().enumerate() {
            for f in 0..self.window {
                let t = i * self.stride + f;
                sum[t] += c.rows(f * self.dof, self.dof);
                hits[t] += 1;
            }
        }
        // stride > window leaves gaps; hold the previous frame across them
        let mut out: Vec<HandConfiguration> = Vec::with_capacity(frames);
        for (s, h) in sum.into_iter().zip(hits) {
            let q = if h > 0 {
                HandConfiguration(s / h as f64)
            } else {
                out.last().cloned().expect("frame 0 is always covered")
            };
            out.push(q);
        }
        HandTrajectory::new(out)
    }

    pub fn chunks_of_all(&self, seqs: &[HandTrajectory]) -> Result<Vec<DVector<f64>>> {
        let mut out = Vec::new();
        for s in seqs {
            out.extend(self.chunks(s)?);
        }
        Ok(out)
    }
}

/// Replaces the cold codes with K-Means centroids of `buffer`.
///
/// `R = min(|cold|, |buffer|)` centroids are written to the `R` lowest cold
/// indices; all other codes are left untouched. Returns the replaced indices.
pub fn refresh_cold_codes(
    codebook: &Codebook,
    cold: &[usize],
    buffer: &[DVector<f64>],
    seed: u64,
) -> Result<(Codebook, Vec<usize>)> {
    let mut out = codebook.clone();
    if cold.is_empty() {
        return Ok((out, Vec::new()));
    }
    if buffer.is_empty() {
        return Err(Error::invalid("refresh buffer", "no encoder outputs collected for a non-empty cold set"));
    }
    if let Some(&c) = cold.iter().find(|&&c| c >= codebook.k) {
        return Err(Error::OutOfRange { index: c, len: codebook.k });
    }
    for z in buffer {
        codebook.check_latent(z.as_slice())?;
    }
    let mut cold = cold.to_vec();
    cold.sort_unstable();
    cold.dedup();
    let r = cold.len().min(buffer.len());
    let centroids = kmeans(buffer, r, seed, kmeans::MAX_ITERS)?;
    let replaced: Vec<usize> = cold[..r].to_vec();
    for (&c, centroid) in replaced.iter().zip(&centroids) {
        out.code_mut(c).copy_from_slice(centroid.as_slice());
    }
    Ok((out, replaced))
}

/// Encoder output, chosen code and decoded chunk.
pub fn reconstruct(enc: &CoderNet, dec: &CoderNet, codebook: &Codebook, chunk: &DVector<f64>) -> Result<DVector<f64>> {
    translate(enc, dec, codebook, chunk)
}

/// Decodes hand `j`'s chunk from hand `i`'s token.
pub fn translate(enc_i: &CoderNet, dec_j: &CoderNet, codebook: &Codebook, chunk_i: &DVector<f64>) -> Result<DVector<f64>> {
    let c = tokenize(enc_i, codebook, chunk_i)?;
    dec_j.forward(&codebook.code_vector(c))
}

pub fn tokenize(enc: &CoderNet, codebook: &Codebook, chunk: &DVector<f64>) -> Result<usize> {
    quantize(codebook, enc.forward(chunk)?.as_slice())
}
