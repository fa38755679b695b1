//! Binary weight files.
//!
//! Little-endian: the magic `SIRATOY1`; the config as eight `u32` words
//! (`num_layers, hidden_dim, num_heads, head_dim, mlp_dim, vocab_size,
//! max_seq_len`, then the bit pattern of the `f32` `norm_eps`); then every
//! tensor in declaration order as raw `f32`.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use sira_core::model::{ModelConfig, ToyModel, Weights};
use sira_core::ModelError;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"SIRATOY1";
const HEADER_WORDS: usize = 8;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a weight file (bad magic)")]
    BadMagic,
    #[error("truncated header")]
    Truncated,
    #[error("payload holds {actual} bytes but the header declares {expected}")]
    Shape { expected: usize, actual: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub fn encode_model(model: &ToyModel) -> Vec<u8> {
    let c = model.config();
    let params = model.weights().parameter_count();
    let mut out = Vec::with_capacity(MAGIC.len() + 4 * (HEADER_WORDS + params));
    out.extend_from_slice(MAGIC);
    for w in [
        c.num_layers as u32,
        c.hidden_dim as u32,
        c.num_heads as u32,
        c.head_dim as u32,
        c.mlp_dim as u32,
        c.vocab_size as u32,
        c.max_seq_len as u32,
        c.norm_eps.to_bits(),
    ] {
        out.extend_from_slice(&w.to_le_bytes());
    }
    for t in model.weights().tensors() {
        for x in t {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<ToyModel, FormatError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let header_end = MAGIC.len() + 4 * HEADER_WORDS;
    if bytes.len() < header_end {
        return Err(FormatError::Truncated);
    }
    let word = |i: usize| {
        let o = MAGIC.len() + 4 * i;
        u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"))
    };
    let config = ModelConfig {
        num_layers: word(0) as usize,
        hidden_dim: word(1) as usize,
        num_heads: word(2) as usize,
        head_dim: word(3) as usize,
        mlp_dim: word(4) as usize,
        vocab_size: word(5) as usize,
        max_seq_len: word(6) as usize,
        norm_eps: f32::from_bits(word(7)),
    };
    config.validate()?;
    let sizes = Weights::tensor_sizes(&config);
    let expected = 4 * sizes.iter().sum::<usize>();
    let payload = &bytes[header_end..];
    if payload.len() != expected {
        return Err(FormatError::Shape {
            expected,
            actual: payload.len(),
        });
    }
    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let tensors = sizes
        .iter()
        .map(|&n| floats.by_ref().take(n).collect())
        .collect();
    let weights = Weights::from_tensors(&config, tensors)?;
    Ok(ToyModel::from_weights(config, weights)?)
}

pub fn save_model(model: &ToyModel, path: &Path) -> Result<(), FormatError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_model(model))?;
    f.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ToyModel, FormatError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_model(&bytes)
}
