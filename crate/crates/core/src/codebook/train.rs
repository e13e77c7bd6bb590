//! Minibatch gradient descent for the VQ autoencoder.
//!
//! Gradients pass the quantizer straight through: the decoder-input gradient
//! at `z_q` is copied onto the encoder output. Codes move only under the
//! codebook term `‖sg(z_e) − e_c‖²`.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{Activation, CoderNet, NetGrad};
use super::{cold_set, quantize, refresh_cold_codes, Codebook, UsageTable};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub k: usize,
    pub d_z: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            k: 256,
            d_z: 32,
            hidden: vec![128, 128],
            activation: Activation::Tanh,
        }
    }
}

impl ArchConfig {
    pub fn encoder_widths(&self, input: usize) -> Vec<usize> {
        std::iter::once(input).chain(self.hidden.iter().copied()).chain([self.d_z]).collect()
    }

    pub fn decoder_widths(&self, output: usize) -> Vec<usize> {
        let mut w = self.encoder_widths(output);
        w.reverse();
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.d_z == 0 || self.hidden.contains(&0) {
            return Err(Error::invalid("arch", "k, d_z and hidden widths must be ≥ 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Commitment weight.
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Refresh cold codes after every this-many epochs; 0 disables.
    pub refresh_every: usize,
    /// Codes quantized fewer than this many times in an epoch are cold.
    pub tau_c: f64,
    pub lambda_distill: f64,
    pub seed: u64,
    /// Reservoir capacity for encoder outputs between refreshes.
    pub buffer_cap: usize,
    /// Distillation-only epochs when onboarding a new hand.
    pub align_epochs: usize,
    /// Joint fine-tuning epochs after alignment.
    pub finetune_epochs: usize,
    /// Whether fine-tuning may move the shared codes.
    pub finetune_codebook: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 0.25,
            learning_rate: 1e-4,
            epochs: 200,
            batch_size: 32,
            refresh_every: 50,
            tau_c: 1.0,
            lambda_distill: 0.1,
            seed: 0,
            buffer_cap: 65_536,
            align_epochs: 200,
            finetune_epochs: 100,
            finetune_codebook: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid("vq.beta", "must be > 0"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("vq.learning_rate", "must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("vq.batch_size", "must be ≥ 1"));
        }
        if !(self.lambda_distill >= 0.0 && self.lambda_distill.is_finite()) {
            return Err(Error::invalid("vq.lambda_distill", "must be ≥ 0"));
        }
        if !self.tau_c.is_finite() {
            return Err(Error::invalid("vq.tau_c", "must be finite"));
        }
        if self.buffer_cap == 0 {
            return Err(Error::invalid("vq.buffer_cap", "must be ≥ 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefreshRecord {
    pub cold: usize,
    pub replaced: usize,
}

/// Epoch means of each loss term, taken during the pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub distill: f64,
    pub total: f64,
    pub active_codes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refresh: Option<RefreshRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub encoder: CoderNet,
    pub decoder: CoderNet,
    pub codebook: Codebook,
    /// [`reconstruction_mse`] of the untrained model.
    pub initial_mse: f64,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewMorphology {
    pub encoder: CoderNet,
    pub decoder: CoderNet,
    pub codebook: Codebook,
    /// Mean distillation loss before and after the alignment stage.
    pub initial_distill: f64,
    pub aligned_distill: f64,
    pub align_history: Vec<EpochRecord>,
    pub finetune_history: Vec<EpochRecord>,
}

fn check_chunks(chunks: &[&DVector<f64>]) -> Result<usize> {
    let width = chunks.first().map(|c| c.len()).ok_or_else(|| Error::invalid("dataset", "no chunks"))?;
    if chunks.iter().any(|c| c.len() != width) {
        return Err(Error::invalid("dataset", "chunks differ in width"));
    }
    if chunks.iter().any(|c| c.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("dataset".into()));
    }
    Ok(width)
}

/// Terms of one training objective.
#[derive(Clone, Copy)]
struct Weights {
    reconstruction: bool,
    vq: bool,
    distill: f64,
    beta: f64,
}

#[derive(Default)]
struct LossSums {
    reconstruction: f64,
    codebook: f64,
    commitment: f64,
    distill: f64,
}

struct BatchGrads {
    enc: NetGrad,
    dec: NetGrad,
    codes: BTreeMap<usize, DVector<f64>>,
}

struct Sample<'a> {
    x: &'a DVector<f64>,
    z_ref: Option<&'a DVector<f64>>,
}

/// Forward and backward pass for one chunk; returns the chosen code and `z_e`.
fn accumulate(
    enc: &CoderNet,
    dec: &CoderNet,
    codebook: &Codebook,
    sample: &Sample<'_>,
    w: Weights,
    grads: &mut BatchGrads,
    sums: &mut LossSums,
) -> Result<(usize, DVector<f64>)> {
    let enc_cache = enc.forward_cached(sample.x)?;
    let z_e = enc_cache.output().clone();
    let c = quantize(codebook, z_e.as_slice())?;
    let mut g_ze = DVector::zeros(z_e.len());
    if w.reconstruction || w.vq {
        let z_q = codebook.code_vector(c);
        if w.reconstruction {
            let dec_cache = dec.forward_cached(&z_q)?;
            let diff = dec_cache.output() - sample.x;
            sums.reconstruction += diff.norm_squared();
            let (dg, g_zq) = dec.backward(&dec_cache, &(diff * 2.0));
            grads.dec.add(&dg);
            g_ze += g_zq;
        }
        if w.vq {
            let delta = &z_e - &z_q;
            let sq = delta.norm_squared();
            sums.codebook += sq;
            sums.commitment += w.beta * sq;
            g_ze += &delta * (2.0 * w.beta);
            *grads.codes.entry(c).or_insert_with(|| DVector::zeros(z_e.len())) -= &delta * 2.0;
        }
    }
    if let Some(z_ref) = sample.z_ref {
        let delta = &z_e - z_ref;
        sums.distill += delta.norm_squared();
        if w.distill > 0.0 {
            g_ze += &delta * (2.0 * w.distill);
        }
    }
    let (eg, _) = enc.backward(&enc_cache, &g_ze);
    grads.enc.add(&eg);
    Ok((c, z_e))
}

struct Trainer<'a> {
    enc: CoderNet,
    dec: CoderNet,
    codebook: Codebook,
    config: &'a TrainConfig,
    rng: ChaCha8Rng,
    history: Vec<EpochRecord>,
}

impl Trainer<'_> {
    #[allow(clippy::too_many_arguments)]
    fn epoch(
        &mut self,
        epoch: usize,
        samples: &[Sample<'_>],
        w: Weights,
        train_dec: bool,
        train_codes: bool,
        refresh: bool,
        buffer: &mut Reservoir,
    ) -> Result<()> {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sums = LossSums::default();
        let mut usage = UsageTable::zeros(self.codebook.k());
        let lr = self.config.learning_rate;
        for batch in order.chunks(self.config.batch_size) {
            let mut grads = BatchGrads {
                enc: NetGrad::zeros_like(&self.enc),
                dec: NetGrad::zeros_like(&self.dec),
                codes: BTreeMap::new(),
            };
            for &i in batch {
                let (c, z_e) = accumulate(&self.enc, &self.dec, &self.codebook, &samples[i], w, &mut grads, &mut sums)?;
                usage.record(c)?;
                if refresh {
                    buffer.offer(z_e, &mut self.rng);
                }
            }
            let scale = lr / batch.len() as f64;
            self.enc.step(&grads.enc, scale);
            if train_dec {
                self.dec.step(&grads.dec, scale);
            }
            if train_codes {
                for (c, g) in &grads.codes {
                    for (e, gv) in self.codebook.code_mut(*c).iter_mut().zip(g.iter()) {
                        *e -= scale * gv;
                    }
                }
            }
        }
        let n = samples.len() as f64;
        let reconstruction = sums.reconstruction / n;
        let codebook = sums.codebook / n;
        let commitment = sums.commitment / n;
        let distill = sums.distill / n;
        let mut total = 0.0;
        if w.reconstruction {
            total += reconstruction;
        }
        if w.vq {
            total += codebook + commitment;
        }
        total += w.distill * distill;
        let mut record = EpochRecord {
            epoch,
            reconstruction,
            codebook,
            commitment,
            distill,
            total,
            active_codes: usage.active(),
            refresh: None,
        };
        let finite = [reconstruction, codebook, commitment, distill].iter().all(|v| v.is_finite())
            && self.enc.is_finite()
            && self.dec.is_finite()
            && self.codebook.as_slice().iter().all(|v| v.is_finite());
        if !finite {
            self.history.push(record);
            return Err(Error::Diverged {
                epoch,
                history: std::mem::take(&mut self.history),
            });
        }
        if refresh && self.config.refresh_every > 0 && epoch.is_multiple_of(self.config.refresh_every) {
            let cold = cold_set(&usage, self.config.tau_c);
            let seed = self.rng.random();
            let (cb, replaced) = if cold.is_empty() || buffer.items.is_empty() {
                (self.codebook.clone(), Vec::new())
            } else {
                refresh_cold_codes(&self.codebook, &cold, &buffer.items, seed)?
            };
            self.codebook = cb;
            record.refresh = Some(RefreshRecord {
                cold: cold.len(),
                replaced: replaced.len(),
            });
            buffer.clear();
        }
        self.history.push(record);
        Ok(())
    }
}

/// Uniform reservoir sample of encoder outputs.
struct Reservoir {
    cap: usize,
    seen: u64,
    items: Vec<DVector<f64>>,
}

impl Reservoir {
    fn new(cap: usize) -> Self {
        Self {
            cap,
            seen: 0,
            items: Vec::new(),
        }
    }

    fn offer(&mut self, z: DVector<f64>, rng: &mut ChaCha8Rng) {
        self.seen += 1;
        if self.items.len() < self.cap {
            self.items.push(z);
        } else {
            let j = rng.random_range(0..self.seen);
            if (j as usize) < self.cap {
                self.items[j as usize] = z;
            }
        }
    }

    fn clear(&mut self) {
        self.seen = 0;
        self.items.clear();
    }
}

/// Trains encoder, decoder and codebook from scratch on `chunks`.
pub fn train_reference(chunks: &[DVector<f64>], arch: &ArchConfig, config: &TrainConfig) -> Result<TrainedModel> {
    arch.validate()?;
    config.validate()?;
    let refs: Vec<&DVector<f64>> = chunks.iter().collect();
    let width = check_chunks(&refs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let enc = CoderNet::random(&arch.encoder_widths(width), arch.activation, &mut rng)?;
    let dec = CoderNet::random(&arch.decoder_widths(width), arch.activation, &mut rng)?;
    let picks: Vec<usize> = if arch.k <= chunks.len() {
        rand::seq::index::sample(&mut rng, chunks.len(), arch.k).into_vec()
    } else {
        (0..arch.k).map(|_| rng.random_range(0..chunks.len())).collect()
    };
    let init = picks.iter().map(|&i| enc.forward(&chunks[i])).collect::<Result<Vec<_>>>()?;
    let codebook = Codebook::from_vectors(&init)?;
    let initial_mse = reconstruction_mse(&enc, &dec, &codebook, chunks)?;

    let samples: Vec<Sample<'_>> = chunks.iter().map(|x| Sample { x, z_ref: None }).collect();
    let w = Weights {
        reconstruction: true,
        vq: true,
        distill: 0.0,
        beta: config.beta,
    };
    let mut t = Trainer {
        enc,
        dec,
        codebook,
        config,
        rng,
        history: Vec::with_capacity(config.epochs),
    };
    let mut buffer = Reservoir::new(config.buffer_cap);
    for epoch in 1..=config.epochs {
        t.epoch(epoch, &samples, w, true, true, true, &mut buffer)?;
    }
    Ok(TrainedModel {
        encoder: t.enc,
        decoder: t.dec,
        codebook: t.codebook,
        initial_mse,
        history: t.history,
    })
}

fn mean_distill(enc: &CoderNet, samples: &[Sample<'_>]) -> Result<f64> {
    let mut s = 0.0;
    for smp in samples {
        s += (enc.forward(smp.x)? - smp.z_ref.expect("paired sample")).norm_squared();
    }
    Ok(s / samples.len() as f64)
}

/// Onboards a new hand onto an existing codebook from paired chunks
/// `(x_new, x_ref)`.
///
/// Stage 1 fits the new encoder to the frozen reference encoder's latents.
/// Stage 2 trains encoder and decoder on reconstruction, VQ and weighted
/// distillation, moving the codes only if `finetune_codebook` is set.
pub fn train_new_morphology(
    pairs: &[(DVector<f64>, DVector<f64>)],
    ref_enc: &CoderNet,
    codebook: &Codebook,
    arch: &ArchConfig,
    config: &TrainConfig,
) -> Result<NewMorphology> {
    arch.validate()?;
    config.validate()?;
    if arch.d_z != codebook.d_z() || ref_enc.output_width() != codebook.d_z() {
        return Err(Error::Dimension {
            what: "latent width",
            expected: codebook.d_z(),
            actual: if arch.d_z != codebook.d_z() { arch.d_z } else { ref_enc.output_width() },
        });
    }
    let news: Vec<&DVector<f64>> = pairs.iter().map(|p| &p.0).collect();
    let width = check_chunks(&news)?;
    let z_refs = pairs.iter().map(|(_, r)| ref_enc.forward(r)).collect::<Result<Vec<_>>>()?;
    let samples: Vec<Sample<'_>> = pairs.iter().zip(&z_refs).map(|((x, _), z)| Sample { x, z_ref: Some(z) }).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let enc = CoderNet::random(&arch.encoder_widths(width), arch.activation, &mut rng)?;
    let dec = CoderNet::random(&arch.decoder_widths(width), arch.activation, &mut rng)?;
    let initial_distill = mean_distill(&enc, &samples)?;
    let mut t = Trainer {
        enc,
        dec,
        codebook: codebook.clone(),
        config,
        rng,
        history: Vec::new(),
    };
    let mut buffer = Reservoir::new(1);
    let align = Weights {
        reconstruction: false,
        vq: false,
        distill: 1.0,
        beta: config.beta,
    };
    for epoch in 1..=config.align_epochs {
        t.epoch(epoch, &samples, align, false, false, false, &mut buffer)?;
    }
    let aligned_distill = mean_distill(&t.enc, &samples)?;
    let align_history = std::mem::take(&mut t.history);

    let finetune = Weights {
        reconstruction: true,
        vq: true,
        distill: config.lambda_distill,
        beta: config.beta,
    };
    for epoch in 1..=config.finetune_epochs {
        t.epoch(epoch, &samples, finetune, true, config.finetune_codebook, false, &mut buffer)?;
    }
    Ok(NewMorphology {
        encoder: t.enc,
        decoder: t.dec,
        codebook: t.codebook,
        initial_distill,
        aligned_distill,
        align_history,
        finetune_history: t.history,
    })
}

/// Mean squared reconstruction error per chunk element.
pub fn reconstruction_mse(enc: &CoderNet, dec: &CoderNet, codebook: &Codebook, chunks: &[DVector<f64>]) -> Result<f64> {
    if chunks.is_empty() {
        return Err(Error::invalid("dataset", "no chunks"));
    }
    let mut s = 0.0;
    let mut n = 0usize;
    for x in chunks {
        let xh = super::reconstruct(enc, dec, codebook, x)?;
        s += (xh - x).norm_squared();
        n += x.len();
    }
    Ok(s / n as f64)
}

/// Loss of one chunk as a function of the encoder, with the quantizer
/// replaced by the fixed shift `offset = z_q − z_e` taken at the base point.
/// Its gradient at the base point is the straight-through gradient.
pub fn ste_surrogate_loss(
    enc: &CoderNet,
    dec: &CoderNet,
    x: &DVector<f64>,
    z_q: &DVector<f64>,
    offset: &DVector<f64>,
    beta: f64,
) -> Result<f64> {
    let z_e = enc.forward(x)?;
    let xh = dec.forward(&(&z_e + offset))?;
    Ok((xh - x).norm_squared() + beta * (z_e - z_q).norm_squared())
}

/// Straight-through encoder gradient of `‖x − x̂‖² + β‖z_e − sg(z_q)‖²` for
/// one chunk, with the `z_q` and offset needed to evaluate
/// [`ste_surrogate_loss`].
pub fn ste_encoder_gradient(
    enc: &CoderNet,
    dec: &CoderNet,
    codebook: &Codebook,
    x: &DVector<f64>,
    beta: f64,
) -> Result<(NetGrad, DVector<f64>, DVector<f64>)> {
    let mut grads = BatchGrads {
        enc: NetGrad::zeros_like(enc),
        dec: NetGrad::zeros_like(dec),
        codes: BTreeMap::new(),
    };
    let w = Weights {
        reconstruction: true,
        vq: true,
        distill: 0.0,
        beta,
    };
    let (c, z_e) = accumulate(enc, dec, codebook, &Sample { x, z_ref: None }, w, &mut grads, &mut LossSums::default())?;
    let z_q = codebook.code_vector(c);
    let offset = &z_q - z_e;
    Ok((grads.enc, z_q, offset))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::PoseChunkSpec;
    use crate::fixtures;

    fn small_arch() -> ArchConfig {
        ArchConfig {
            k: 16,
            d_z: 4,
            hidden: vec![16],
            activation: Activation::Tanh,
        }
    }

    fn chunks() -> Vec<DVector<f64>> {
        let seqs = fixtures::sinusoid_sequences(1, 6, 24, 2);
        PoseChunkSpec::new(4, 2, 2).unwrap().chunks_of_all(&seqs).unwrap()
    }

    #[test]
    fn history_length_and_determinism() {
        let cfg = TrainConfig {
            epochs: 12,
            learning_rate: 0.01,
            refresh_every: 5,
            ..Default::default()
        };
        let a = train_reference(&chunks(), &small_arch(), &cfg).unwrap();
        let b = train_reference(&chunks(), &small_arch(), &cfg).unwrap();
        assert_eq!(a.history.len(), 12);
        assert_eq!(a, b);
        let refreshes: Vec<_> = a.history.iter().filter_map(|r| r.refresh.map(|x| (r.epoch, x))).collect();
        assert_eq!(refreshes.iter().map(|r| r.0).collect::<Vec<_>>(), vec![5, 10]);
        for r in &a.history {
            assert!(r.reconstruction >= 0.0 && r.codebook >= 0.0 && r.commitment >= 0.0 && r.total.is_finite());
        }
    }

    #[test]
    fn divergence_is_reported_with_history() {
        let cfg = TrainConfig {
            epochs: 50,
            learning_rate: 1e6,
            ..Default::default()
        };
        match train_reference(&chunks(), &small_arch(), &cfg) {
            Err(Error::Diverged { history, epoch }) => assert_eq!(history.len(), epoch),
            other => panic!("expected divergence, got {:?}", other.map(|m| m.history.len())),
        }
    }

    #[test]
    fn alignment_stage_leaves_decoder_and_codes() {
        let (r, n) = fixtures::linear_pair(2, 4, 16);
        let rs = PoseChunkSpec::new(4, 2, 4).unwrap().chunks_of_all(&r).unwrap();
        let ns = PoseChunkSpec::new(4, 2, 5).unwrap().chunks_of_all(&n).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            align_epochs: 4,
            finetune_epochs: 0,
            learning_rate: 0.01,
            ..Default::default()
        };
        let arch = small_arch();
        let reference = train_reference(&rs, &arch, &cfg).unwrap();
        let pairs: Vec<_> = ns.into_iter().zip(rs).collect();
        let out = train_new_morphology(&pairs, &reference.encoder, &reference.codebook, &arch, &cfg).unwrap();
        assert_eq!(out.codebook, reference.codebook);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let _enc = CoderNet::random(&arch.encoder_widths(20), arch.activation, &mut rng).unwrap();
        let dec0 = CoderNet::random(&arch.decoder_widths(20), arch.activation, &mut rng).unwrap();
        assert_eq!(out.decoder, dec0);
        assert!(out.aligned_distill < out.initial_distill);

        let wrong = ArchConfig { d_z: 5, ..arch };
        assert!(train_new_morphology(&pairs, &reference.encoder, &reference.codebook, &wrong, &cfg).is_err());
    }

    #[test]
    fn ste_gradient_matches_surrogate_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let enc = CoderNet::random(&[6, 5, 3], Activation::Tanh, &mut rng).unwrap();
        let dec = CoderNet::random(&[3, 5, 6], Activation::Tanh, &mut rng).unwrap();
        let codes: Vec<DVector<f64>> = (0..8).map(|_| DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0))).collect();
        let cb = Codebook::from_vectors(&codes).unwrap();
        let x = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        let (g, z_q, offset) = ste_encoder_gradient(&enc, &dec, &cb, &x, 0.25).unwrap();
        let flat = g.flatten();
        let h = 1e-6;
        for p in 0..enc.parameter_count() {
            let (mut a, mut b) = (enc.clone(), enc.clone());
            a.map_parameter(p, |v| v + h);
            b.map_parameter(p, |v| v - h);
            let fd = (ste_surrogate_loss(&a, &dec, &x, &z_q, &offset, 0.25).unwrap()
                - ste_surrogate_loss(&b, &dec, &x, &z_q, &offset, 0.25).unwrap())
                / (2.0 * h);
            assert!((fd - flat[p]).abs() <= 1e-4 * fd.abs().max(1e-6), "param {p}: {fd} vs {}", flat[p]);
        }
    }
}
