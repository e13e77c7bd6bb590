//! Token masking for the masked-prediction curriculum.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskedToken {
    Code(usize),
    Mask,
}

/// Replaces each position by [`MaskedToken::Mask`] independently with
/// probability `p`.
pub fn mask_sequence(tokens: &[usize], p: f64, seed: u64) -> Result<Vec<MaskedToken>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid("mask ratio", format!("{p} is outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(tokens
        .iter()
        .map(|&t| {
            if rng.random::<f64>() < p {
                MaskedToken::Mask
            } else {
                MaskedToken::Code(t)
            }
        })
        .collect())
}

/// No masking for the first 20% of training, a linear ramp to full masking
/// by 80%, then full masking.
pub fn mask_ratio_schedule(epoch_fraction: f64) -> f64 {
    if epoch_fraction < 0.2 {
        0.0
    } else if epoch_fraction <= 0.8 {
        ((epoch_fraction - 0.2) / 0.6).min(1.0)
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extremes() {
        let tokens: Vec<usize> = (0..100).collect();
        let none = mask_sequence(&tokens, 0.0, 1).unwrap();
        assert!(none.iter().zip(&tokens).all(|(m, &t)| *m == MaskedToken::Code(t)));
        assert!(mask_sequence(&tokens, 1.0, 1).unwrap().iter().all(|m| *m == MaskedToken::Mask));
        assert!(mask_sequence(&tokens, 1.5, 1).is_err());
    }

    #[test]
    fn half_masking_concentrates() {
        let tokens = vec![3usize; 10_000];
        for seed in 0..5 {
            let masked = mask_sequence(&tokens, 0.5, seed).unwrap();
            let frac = masked.iter().filter(|m| **m == MaskedToken::Mask).count() as f64 / 1e4;
            assert!((0.48..=0.52).contains(&frac), "{frac}");
        }
    }

    #[test]
    fn schedule_anchors_and_shape() {
        assert_eq!(mask_ratio_schedule(0.1), 0.0);
        assert_eq!(mask_ratio_schedule(0.5), 0.5);
        assert_eq!(mask_ratio_schedule(0.9), 1.0);
        let mut prev = 0.0;
        for i in 0..=1000 {
            let p = mask_ratio_schedule(i as f64 / 1000.0);
            assert!(p >= prev && p - prev < 0.01);
            prev = p;
        }
    }
}
