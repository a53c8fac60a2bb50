//! Weakly supervised biomarker prediction from gigapixel slide images.
//!
//! The crate covers the full pipeline from raw slide rasters to per-patient
//! predictions and attention maps:
//!
//! ```text
//! slide image ──► tessellate ──► filter ──► stain-normalize ──► embed
//!                (imaging)      (imaging)   (stain)             (features)
//!                                                                  │
//!                                                                  ▼
//!            heatmaps ◄── explain ◄── transformer MIL ◄── embedding bags
//!            (explain)               (model, train)       (features)
//! ```
//!
//! Slides are cut into fixed-size tiles at a target resolution, background
//! and blurry tiles are dropped, tiles are Macenko stain-normalized, and a
//! feature extractor turns each kept tile into an embedding vector. The
//! embeddings of one slide form a bag; a transformer aggregator with class
//! tokens is trained end-to-end on weak slide-level labels. Attention
//! rollout and per-patch class scores map predictions back to tissue
//! regions.
//!
//! Training, cross-validation, and the synthetic benchmark live in
//! [`train`] and [`synth`]; evaluation metrics (AUROC, AUPRC, confusion at
//! operating points) in [`metrics`].

// Force linkage of the BLAS implementation that backs ndarray's gemm.
extern crate blas_src;

pub mod explain;
pub mod features;
pub mod imaging;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod stain;
pub mod synth;
pub mod train;

pub mod cli;
