//! Checkpoint serialization.
//!
//! A checkpoint is a single file: one line of JSON metadata terminated by a
//! newline, followed by the raw parameter data. The header carries the
//! architecture config, the training iteration, the best validation AUROC
//! seen so far, the training seed, and a tensor registry of
//! `{name, shape, offset}` records. `offset` is the byte position of each
//! tensor within the data section, which is the concatenation of all
//! registered tensors as little-endian `f32` in registry order.
//!
//! Models train in `f32` or `f64`; parameters are stored as `f32` either
//! way, so an `f64` round trip preserves exactly the `f32`-representable
//! part of every weight.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ArchConfig, ModelError, PredictorModel, TensorSpec, Trainable};
use crate::numeric::Real;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint header: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed checkpoint: {reason}")]
    Format { reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One tensor registry entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of this tensor within the data section.
    pub offset: u64,
}

/// JSON header written on the first line of every checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ArchConfig,
    pub iteration: u64,
    pub best_val_auroc: f64,
    pub seed: u64,
    pub tensors: Vec<TensorRecord>,
}

fn registry_from_specs(specs: &[TensorSpec]) -> Vec<TensorRecord> {
    let mut offset = 0u64;
    specs
        .iter()
        .map(|spec| {
            let rec = TensorRecord {
                name: spec.name.clone(),
                shape: spec.shape.clone(),
                offset,
            };
            offset += (spec.num_elements() * 4) as u64;
            rec
        })
        .collect()
}

/// Writes `model` with its training metadata to `path`.
pub fn save_checkpoint<F: Real>(
    path: &Path,
    model: &PredictorModel<F>,
    iteration: u64,
    best_val_auroc: f64,
    seed: u64,
) -> Result<(), CheckpointError> {
    if !(0.0..=1.0).contains(&best_val_auroc) {
        return Err(CheckpointError::Format {
            reason: format!("best_val_auroc {best_val_auroc} outside [0, 1]"),
        });
    }
    let header = CheckpointHeader {
        config: model.arch_config(),
        iteration,
        best_val_auroc,
        seed,
        tensors: registry_from_specs(&model.tensor_specs()),
    };
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for tensor in model.tensors() {
        for &v in tensor {
            out.write_all(&(v.to_f32().unwrap()).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a checkpoint back into a model of float type `F`.
pub fn load_checkpoint<F: Real>(
    path: &Path,
) -> Result<(PredictorModel<F>, CheckpointHeader), CheckpointError> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut raw = Vec::new();
    reader.read_to_end(&mut raw)?;
    let newline = raw.iter().position(|&b| b == b'\n').ok_or_else(|| {
        CheckpointError::Format {
            reason: "missing header line".into(),
        }
    })?;
    let header: CheckpointHeader = serde_json::from_slice(&raw[..newline])?;
    if !(0.0..=1.0).contains(&header.best_val_auroc) {
        return Err(CheckpointError::Format {
            reason: format!("best_val_auroc {} outside [0, 1]", header.best_val_auroc),
        });
    }

    let mut model = PredictorModel::<F>::init(&header.config, header.seed)?;
    let specs = model.tensor_specs();
    if specs.len() != header.tensors.len() {
        return Err(CheckpointError::Format {
            reason: format!(
                "tensor registry lists {} tensors, model has {}",
                header.tensors.len(),
                specs.len()
            ),
        });
    }
    let mut expected_offset = 0u64;
    for (spec, rec) in specs.iter().zip(&header.tensors) {
        if spec.name != rec.name || spec.shape != rec.shape {
            return Err(CheckpointError::Format {
                reason: format!(
                    "tensor {} with shape {:?} does not match model tensor {} {:?}",
                    rec.name, rec.shape, spec.name, spec.shape
                ),
            });
        }
        if rec.offset != expected_offset {
            return Err(CheckpointError::Format {
                reason: format!(
                    "tensor {} at offset {}, expected {}",
                    rec.name, rec.offset, expected_offset
                ),
            });
        }
        expected_offset += (spec.num_elements() * 4) as u64;
    }

    let data = &raw[newline + 1..];
    if data.len() as u64 != expected_offset {
        return Err(CheckpointError::Format {
            reason: format!(
                "data section holds {} bytes, registry requires {}",
                data.len(),
                expected_offset
            ),
        });
    }
    let mut cursor = 0usize;
    for slot in model.tensors_mut() {
        for v in slot.iter_mut() {
            let bytes: [u8; 4] = data[cursor..cursor + 4].try_into().unwrap();
            let value = f32::from_le_bytes(bytes);
            if !value.is_finite() {
                return Err(CheckpointError::Format {
                    reason: format!("non-finite parameter at data offset {cursor}"),
                });
            }
            *v = F::from_f32(value).unwrap();
            cursor += 4;
        }
    }
    Ok((model, header))
}
