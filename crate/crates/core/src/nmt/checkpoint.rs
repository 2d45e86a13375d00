//! Versioned binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size | content                                              |
//! |--------|------|------------------------------------------------------|
//! | 0      | 4    | magic bytes `TNMT`                                   |
//! | 4      | 4    | format version, `u32` (currently 1)                  |
//! | 8      | 4    | `num_layers: u32`                                    |
//! | 12     | 4    | `model_dim: u32`                                     |
//! | 16     | 4    | `ffn_dim: u32`                                       |
//! | 20     | 4    | `num_heads: u32`                                     |
//! | 24     | 4    | `max_positions: u32`                                 |
//! | 28     | 4    | `dropout_rate: f32`                                  |
//! | 32     | 4    | vocabulary unit count, `u32`                         |
//! | 36     | ...  | per unit: byte length `u32`, then UTF-8 bytes        |
//! | ...    | 4    | parameter tensor count, `u32`                        |
//! | ...    | ...  | per tensor: `rows: u32`, `cols: u32`, `rows*cols` f32|
//!
//! Tensors are stored row-major in the model's canonical parameter order
//! (embedding table first). Loading restores bit-identical `f32` parameters,
//! so forward outputs of a round-tripped model equal the original's exactly.

use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use crate::corpus;

use super::model::{ModelConfig, Seq2SeqModel};
use super::vocab::Vocabulary;
use super::NmtError;

const MAGIC: &[u8; 4] = b"TNMT";
const VERSION: u32 = 1;

#[derive(Error, Debug)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes: not a model checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("vocabulary size mismatch: checkpoint has {checkpoint}, embedding table has {embedding} rows")]
    VocabMismatch { checkpoint: usize, embedding: usize },
    #[error("model construction failed: {0}")]
    Model(#[from] NmtError),
}

/// A deserialized checkpoint.
pub struct CheckpointData {
    pub model: Seq2SeqModel<f32>,
    pub vocab: Vocabulary,
}

/// Serializes the model and its vocabulary; the write is atomic.
pub fn save_checkpoint(
    model: &Seq2SeqModel<f32>,
    vocab: &Vocabulary,
    path: impl AsRef<Path>,
) -> Result<(), CheckpointError> {
    if vocab.len() != model.vocab_size() {
        return Err(CheckpointError::VocabMismatch {
            checkpoint: vocab.len(),
            embedding: model.vocab_size(),
        });
    }
    let cfg = model.config();
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        cfg.num_layers,
        cfg.model_dim,
        cfg.ffn_dim,
        cfg.num_heads,
        cfg.max_positions,
    ] {
        bytes.extend_from_slice(&(v as u32).to_le_bytes());
    }
    bytes.extend_from_slice(&(cfg.dropout_rate as f32).to_le_bytes());

    bytes.extend_from_slice(&(vocab.len() as u32).to_le_bytes());
    for unit in vocab.units() {
        bytes.extend_from_slice(&(unit.len() as u32).to_le_bytes());
        bytes.extend_from_slice(unit.as_bytes());
    }

    let params = model.parameters();
    bytes.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        bytes.extend_from_slice(&(p.value.nrows() as u32).to_le_bytes());
        bytes.extend_from_slice(&(p.value.ncols() as u32).to_le_bytes());
        for &v in p.value.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }

    corpus::write_atomic(path.as_ref(), &bytes).map_err(|e| match e {
        corpus::CorpusError::Io { source, .. } => CheckpointError::Io(source),
        other => CheckpointError::Malformed(other.to_string()),
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated(self.bytes.len()));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, CheckpointError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Reads a checkpoint back into a model and vocabulary.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<CheckpointData, CheckpointError> {
    let bytes = std::fs::read(path.as_ref())?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let config = ModelConfig {
        num_layers: r.u32()? as usize,
        model_dim: r.u32()? as usize,
        ffn_dim: r.u32()? as usize,
        num_heads: r.u32()? as usize,
        max_positions: r.u32()? as usize,
        dropout_rate: r.f32()? as f64,
    };

    let unit_count = r.u32()? as usize;
    let mut units = Vec::with_capacity(unit_count);
    for _ in 0..unit_count {
        let len = r.u32()? as usize;
        let raw = r.take(len)?;
        let unit = std::str::from_utf8(raw)
            .map_err(|e| CheckpointError::Malformed(format!("vocab unit not UTF-8: {e}")))?;
        units.push(unit.to_string());
    }
    let vocab = Vocabulary::from_units(&units);
    if vocab.len() != unit_count {
        return Err(CheckpointError::Malformed(format!(
            "vocabulary block lists {unit_count} units but reconstructs to {}",
            vocab.len()
        )));
    }

    let mut model = Seq2SeqModel::<f32>::new(config, unit_count, 0)?;
    let tensor_count = r.u32()? as usize;
    {
        let params = model.parameters_mut();
        if tensor_count != params.len() {
            return Err(CheckpointError::Malformed(format!(
                "checkpoint has {tensor_count} tensors, model expects {}",
                params.len()
            )));
        }
        for (index, p) in params.into_iter().enumerate() {
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            if index == 0 && rows != unit_count {
                return Err(CheckpointError::VocabMismatch {
                    checkpoint: unit_count,
                    embedding: rows,
                });
            }
            if (rows, cols) != (p.value.nrows(), p.value.ncols()) {
                return Err(CheckpointError::Malformed(format!(
                    "tensor {index}: checkpoint shape {rows}x{cols} != model shape {}x{}",
                    p.value.nrows(),
                    p.value.ncols()
                )));
            }
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(r.f32()?);
            }
            p.value = Array2::from_shape_vec((rows, cols), data)
                .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        }
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes after parameter block",
            bytes.len() - r.pos
        )));
    }
    Ok(CheckpointData { model, vocab })
}
