//! Training: optimizers, schedules, the batch-size-1 loop, fold
//! construction, cross-validation and the data-efficiency sweep.
//!
//! Everything in this module operates on in-memory [`TrainBag`] values;
//! reading bags and manifests off disk is the CLI's job. All randomness
//! (initialization, shuffling, dropout, subsampling) flows from explicit
//! seeds through ChaCha8 generators, so a fixed seed reproduces a run
//! bit for bit on one platform.

mod crossval;
mod folds;
mod optim;
mod runner;

pub use crossval::{
    crossval, patient_scores, sweep, CrossvalOutcome, CrossvalReport, FoldCounts, FoldReport,
    SweepPoint, SweepReport, SweepRun,
};
pub use folds::{make_folds, stratified_prefix_subsets, subsample_patients, FoldRoles, SplitPlan};
pub use optim::{adam_step, adamw_step, one_cycle_lr, AdamState};
pub use runner::{train_loop, validation_auroc, EvalPoint, TrainOutcome};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::MetricError;
use crate::model::{ArchConfig, ModelError};
use crate::numeric::Real;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {reason}")]
    InvalidConfig { reason: String },
    #[error("class {class} has {count} labeled patients, need at least {needed}")]
    Stratification {
        class: u8,
        count: usize,
        needed: usize,
    },
    #[error("requested size {size} exceeds the {available} labeled patients")]
    Range { size: usize, available: usize },
    #[error("unknown target column {0:?}")]
    UnknownTarget(String),
    #[error("{reason}")]
    Validation { reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Optimizer family. `AdamW` decays weights decoupled from the adaptive
/// step; `Adam` folds the decay into the gradient as a classic L2 term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    AdamW,
    Adam,
}

/// Learning-rate schedule over the whole run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    /// `lr` from the config at every step.
    Constant,
    /// Cosine one-cycle: ramp to `max_lr` over the first `warmup_frac` of
    /// the run, then cosine decay. See [`one_cycle_lr`].
    OneCycle { max_lr: f64, warmup_frac: f64 },
}

/// Full recipe for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    /// Base learning rate; under `OneCycle` it is superseded by the schedule.
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Validate every this many optimization steps (a final validation
    /// always runs regardless).
    pub eval_interval: usize,
    pub schedule: Schedule,
    pub seed: u64,
    /// Optional global L2 gradient-norm clip. Off by default.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    pub model: ArchConfig,
}

impl TrainConfig {
    /// The transformer recipe used for slide bags: AdamW with learning rate
    /// and weight decay both 2e-5, eight epochs at batch size one,
    /// validation every 500 steps.
    pub fn transformer_recipe(model: ArchConfig, seed: u64) -> Self {
        TrainConfig {
            optimizer: OptimizerKind::AdamW,
            lr: 2e-5,
            weight_decay: 2e-5,
            epochs: 8,
            eval_interval: 500,
            schedule: Schedule::Constant,
            seed,
            grad_clip: None,
            model,
        }
    }

    /// The AttentionMIL recipe: Adam with weight decay 1e-2 under a cosine
    /// one-cycle schedule peaking at 1e-4 after a 25% warmup, 32 epochs.
    pub fn attention_mil_recipe(model: ArchConfig, seed: u64) -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            lr: 1e-4,
            weight_decay: 1e-2,
            epochs: 32,
            eval_interval: 500,
            schedule: Schedule::OneCycle {
                max_lr: 1e-4,
                warmup_frac: 0.25,
            },
            seed,
            grad_clip: None,
            model,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |reason: String| Err(TrainError::InvalidConfig { reason });
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return fail(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.eval_interval == 0 {
            return fail("eval_interval must be at least 1".into());
        }
        if let Schedule::OneCycle { max_lr, warmup_frac } = self.schedule {
            if !max_lr.is_finite() || max_lr <= 0.0 {
                return fail(format!("one-cycle max_lr must be positive, got {max_lr}"));
            }
            if !warmup_frac.is_finite() || !(0.0..=1.0).contains(&warmup_frac) {
                return fail(format!(
                    "one-cycle warmup_frac must lie in [0, 1], got {warmup_frac}"
                ));
            }
        }
        if let Some(clip) = self.grad_clip {
            if !clip.is_finite() || clip <= 0.0 {
                return fail(format!("grad_clip must be positive, got {clip}"));
            }
        }
        match &self.model {
            ArchConfig::Transformer(cfg) => cfg.validate()?,
            ArchConfig::AttentionMil(cfg) => cfg.validate()?,
            ArchConfig::MeanPool(cfg) => cfg.validate()?,
        }
        Ok(())
    }
}

/// One bag ready for training: embeddings plus per-target labels.
#[derive(Debug, Clone)]
pub struct TrainBag<F> {
    /// Slide or bag identifier, for reporting.
    pub id: String,
    /// Owning patient; bags of one patient never straddle a fold boundary.
    pub patient_id: String,
    /// One label per target; `None` is NA.
    pub labels: Vec<Option<u8>>,
    pub embeddings: Array2<F>,
}

impl<F: Real> TrainBag<F> {
    pub fn new(
        id: impl Into<String>,
        patient_id: impl Into<String>,
        labels: Vec<Option<u8>>,
        embeddings: Array2<F>,
    ) -> Self {
        TrainBag {
            id: id.into(),
            patient_id: patient_id.into(),
            labels,
            embeddings,
        }
    }
}
