//! Embedding bags: per-tile feature vectors for one slide, their on-disk
//! format, the dataset manifest, and a deterministic stub extractor that
//! stands in for an external encoder in end-to-end runs.

mod bagfile;
mod manifest;
mod stub;

pub use bagfile::{read_bag, write_bag};
pub use manifest::{DatasetManifest, ManifestError, ManifestRow};
pub use stub::StubExtractor;

use crate::numeric::Real;
use ndarray::Array2;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bag format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },
    #[error("invalid embedding bag: {reason}")]
    InvalidBag { reason: String },
    #[error("embedding dimension mismatch: expected {expected}, {path} has {found}")]
    DimMismatch {
        expected: usize,
        found: usize,
        path: PathBuf,
    },
}

/// All tile embeddings of one slide plus identifiers and optional tile
/// grid coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBag {
    pub slide_id: String,
    pub patient_id: String,
    /// One (grid_x, grid_y) per row, or empty when coordinates are
    /// unknown.
    pub coords: Vec<[u32; 2]>,
    /// n x d, row per tile.
    pub embeddings: Array2<f32>,
}

impl EmbeddingBag {
    pub fn new(
        slide_id: String,
        patient_id: String,
        coords: Vec<[u32; 2]>,
        embeddings: Array2<f32>,
    ) -> Result<Self, FeatureError> {
        if embeddings.nrows() == 0 || embeddings.ncols() == 0 {
            return Err(FeatureError::InvalidBag {
                reason: format!(
                    "embeddings must be non-empty, got {}x{}",
                    embeddings.nrows(),
                    embeddings.ncols()
                ),
            });
        }
        if !coords.is_empty() && coords.len() != embeddings.nrows() {
            return Err(FeatureError::InvalidBag {
                reason: format!(
                    "{} coords for {} embedding rows",
                    coords.len(),
                    embeddings.nrows()
                ),
            });
        }
        if let Some((i, _)) = embeddings.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(FeatureError::InvalidBag {
                reason: format!("embedding value at flat index {i} is not finite"),
            });
        }
        Ok(Self {
            slide_id,
            patient_id,
            coords,
            embeddings,
        })
    }

    pub fn n(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    /// The embedding matrix in the float type the model runs in.
    pub fn to_matrix<F: Real>(&self) -> Array2<F> {
        self.embeddings.mapv(|v| F::from_f32(v).expect("finite"))
    }
}
