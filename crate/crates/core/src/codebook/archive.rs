//! Versioned JSON archive holding a codebook and per-hand coder nets.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::net::CoderNet;
use super::{Codebook, PoseChunkSpec};
use crate::error::{Error, Result};
use crate::io::{read_text, write_text};

pub const ARCHIVE_VERSION: u32 = 1;

/// Encoder, decoder and chunking of one hand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MorphologyNets {
    pub chunk: PoseChunkSpec,
    pub encoder: CoderNet,
    pub decoder: CoderNet,
}

impl MorphologyNets {
    pub fn validate(&self, codebook: &Codebook) -> Result<()> {
        self.chunk.validate()?;
        let w = self.chunk.width();
        if self.encoder.input_width() != w || self.decoder.output_width() != w {
            return Err(Error::invalid("morphology", "coder widths do not match the chunk shape"));
        }
        if self.encoder.output_width() != codebook.d_z() || self.decoder.input_width() != codebook.d_z() {
            return Err(Error::Dimension {
                what: "coder latent width",
                expected: codebook.d_z(),
                actual: self.encoder.output_width(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodebookArchive {
    pub version: u32,
    pub codebook: Codebook,
    pub morphologies: BTreeMap<String, MorphologyNets>,
}

impl CodebookArchive {
    pub fn new(codebook: Codebook) -> Self {
        Self {
            version: ARCHIVE_VERSION,
            codebook,
            morphologies: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, nets: MorphologyNets) -> Result<()> {
        nets.validate(&self.codebook)?;
        self.morphologies.insert(name.to_string(), nets);
        Ok(())
    }

    pub fn morphology(&self, name: &str) -> Result<&MorphologyNets> {
        self.morphologies
            .get(name)
            .ok_or_else(|| Error::invalid("morphology", format!("archive has no hand named `{name}`")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != ARCHIVE_VERSION {
            return Err(Error::invalid("archive.version", format!("unsupported version {}", self.version)));
        }
        for nets in self.morphologies.values() {
            nets.validate(&self.codebook)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("archive serializes");
        s.push('\n');
        s
    }

    pub fn from_json(context: &str, text: &str) -> Result<Self> {
        let a: Self = serde_json::from_str(text).map_err(|e| Error::parse(context, e.to_string()))?;
        a.validate()?;
        Ok(a)
    }

    /// SHA-256 of the serialized archive, hex encoded.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_json())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&path.display().to_string(), &read_text(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::Activation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn archive() -> CodebookArchive {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cb = Codebook::from_rows(2, 3, vec![0.1, 0.2, 0.3, -1.0, 1e-300, 7.0]).unwrap();
        let mut a = CodebookArchive::new(cb);
        let chunk = PoseChunkSpec::new(2, 1, 2).unwrap();
        let nets = MorphologyNets {
            chunk,
            encoder: CoderNet::random(&[4, 5, 3], Activation::Tanh, &mut rng).unwrap(),
            decoder: CoderNet::random(&[3, 5, 4], Activation::Tanh, &mut rng).unwrap(),
        };
        a.insert("ref", nets).unwrap();
        a
    }

    #[test]
    fn round_trip_is_exact() {
        let a = archive();
        let b = CodebookArchive::from_json("a", &a.to_json()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn mismatched_nets_are_rejected() {
        let mut a = archive();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let nets = MorphologyNets {
            chunk: PoseChunkSpec::new(2, 1, 2).unwrap(),
            encoder: CoderNet::random(&[4, 5, 2], Activation::Tanh, &mut rng).unwrap(),
            decoder: CoderNet::random(&[2, 5, 4], Activation::Tanh, &mut rng).unwrap(),
        };
        assert!(a.insert("bad", nets).is_err());
        let mut text = a.to_json();
        text = text.replacen("\"version\":1", "\"version\":9", 1);
        assert!(CodebookArchive::from_json("a", &text).is_err());
    }
}
