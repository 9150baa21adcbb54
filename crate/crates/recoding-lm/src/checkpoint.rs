//! Checkpoint persistence: an 8-byte magic, a little-endian u32 format
//! version, then the bincode-encoded payload (training config, vocabulary
//! in id order, and all parameter tensors). f64 tensors round-trip
//! bit-exactly. See docs/formats.md for the layout notes.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::params::LmParameters;

const MAGIC: &[u8; 8] = b"RCLMCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Vocabulary tokens in id order.
    pub vocab_tokens: Vec<String>,
    pub params: LmParameters,
}

impl Checkpoint {
    pub fn new(config: TrainConfig, vocab: &Vocabulary, params: LmParameters) -> Self {
        Checkpoint {
            config,
            vocab_tokens: vocab.tokens().to_vec(),
            params,
        }
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::from_tokens(self.vocab_tokens.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let payload = bincode::serialize(self)
            .map_err(|e| Error::Checkpoint(format!("encode failed: {e}")))?;
        let mut file = std::fs::File::create(path)?;
        file.write_all(MAGIC)?;
        file.write_all(&VERSION.to_le_bytes())?;
        file.write_all(&payload)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path)?;
        let mut header = [0u8; 12];
        file.read_exact(&mut header)
            .map_err(|_| Error::Checkpoint("file too short for header".into()))?;
        if &header[..8] != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(header[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (expected {VERSION})"
            )));
        }
        let mut payload = Vec::new();
        file.read_to_end(&mut payload)?;
        let ckpt: Checkpoint = bincode::deserialize(&payload)
            .map_err(|e| Error::Checkpoint(format!("corrupt payload: {e}")))?;
        if ckpt.vocab_tokens.len() != ckpt.params.dims.vocab {
            return Err(Error::Checkpoint(
                "vocabulary length disagrees with embedding table".into(),
            ));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;
    use crate::corpus::Vocabulary;
    use crate::model::params::Dims;
    use crate::recoder::StepSizeParams;

    fn toy() -> Checkpoint {
        let lines = vec![vec!["a".to_string(), "b".to_string(), "c".to_string()]];
        let vocab = Vocabulary::build(&lines, 1).unwrap();
        let mut config = TrainConfig::default();
        config.layers = 1;
        config.emb_size = 3;
        config.hidden_size = 4;
        let params = LmParameters::init(
            Dims {
                vocab: vocab.len(),
                emb: 3,
                hidden: 4,
                layers: 1,
            },
            StepSizeParams::Fixed {
                alphas: vec![[0.0; 2]],
            },
            11,
        );
        Checkpoint::new(config, &vocab, params)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let ckpt = toy();
        let dir = std::env::temp_dir().join(format!("rclm-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("toy.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.vocab_tokens, ckpt.vocab_tokens);
        assert_eq!(loaded.config, ckpt.config);
        assert_eq!(loaded.params.embeddings.data, ckpt.params.embeddings.data);
        for (a, b) in loaded
            .params
            .decoder
            .w
            .data
            .iter()
            .zip(&ckpt.params.decoder.w.data)
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn truncated_file_is_a_corruption_error() {
        let ckpt = toy();
        let dir = std::env::temp_dir().join(format!("rclm-ckpt-trunc-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("toy.ckpt");
        ckpt.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(err.to_string().contains("checkpoint"));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = std::env::temp_dir().join(format!("rclm-ckpt-magic-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bogus.ckpt");
        std::fs::write(&path, b"NOTACKPT____junk").unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(err.to_string().contains("magic"));
        std::fs::remove_dir_all(&dir).ok();
    }
}
