//! Bag-level predictors and their training machinery.
//!
//! Three aggregators share the [`Trainable`] interface:
//!
//! * [`TransformerModel`]: a pre-LN transformer encoder over the patch
//!   sequence with learned class tokens (or global average pooling), read out
//!   by per-target linear heads.
//! * [`AttentionMilModel`]: gated attention pooling, a tanh-scored softmax
//!   over patches followed by a linear head.
//! * [`MeanPoolModel`]: unweighted mean over patch embeddings, linear head.
//!
//! None of the aggregators uses positional information, so every one of them
//! is invariant to the order of patches in a bag; the test suites treat that
//! as a hard requirement rather than a nicety.
//!
//! Gradients are computed by hand-written reverse-mode passes that mirror the
//! forward code. The contract is behavioural: analytic gradients must agree
//! with central finite differences on every parameter tensor (see the
//! gradient-check tests). Losses use the numerically stable
//! binary-cross-entropy-with-logits form and support per-target NA masking.

mod attention;
mod baselines;
mod checkpoint;
mod loss;
mod transformer;

pub use attention::{msa, self_attention, MsaOutput};
pub use baselines::{
    AttentionMilConfig, AttentionMilModel, MeanPoolConfig, MeanPoolModel,
};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointError, CheckpointHeader, TensorRecord,
};
pub use loss::bce_with_logits;
pub(crate) use loss::sigmoid;
pub use transformer::{
    AttentionTrace, LayerParams, TransformerModel, TransformerParams,
};

use crate::numeric::Real;
use ndarray::{ArrayBase, Array1, Array2, Data, Dimension};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors produced by model construction, forward passes and losses.
#[derive(Debug, Error)]
pub enum ModelError {
    /// A NaN or infinity showed up where only finite values are legal.
    #[error("non-finite values in {context}")]
    Numeric { context: String },
    /// Incompatible dimensions between a bag, the config and/or parameters.
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimMismatch {
        context: String,
        expected: usize,
        found: usize,
    },
    /// A bag with zero patches.
    #[error("empty bag: at least one patch embedding is required")]
    EmptyBag,
    /// Every target label was NA, leaving nothing to compute a loss over.
    #[error("all target labels are NA")]
    MaskedOut,
    /// A label outside {0, 1}.
    #[error("invalid label value {value}; labels must be 0, 1 or NA")]
    InvalidLabel { value: u8 },
    /// A configuration that fails validation.
    #[error("invalid model config: {reason}")]
    InvalidConfig { reason: String },
}

/// How the transformer reduces token states to a bag representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Learned class tokens are prepended to the patch sequence; target `i`
    /// is read from the final state of class token `i`.
    ClassToken,
    /// No class tokens; the head reads the mean over all patch token states.
    GlobalAverage,
}

/// Hyperparameters of the transformer aggregator.
///
/// The default is the full-size configuration used for slide bags: 768-d
/// inputs, latent width 512, two blocks of eight 64-d heads, and a 2048-wide
/// MLP. [`ModelConfig::tiny`] is a miniature used by gradient checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding dimension of the incoming patches.
    pub input_dim: usize,
    /// Token width inside the encoder.
    pub latent_dim: usize,
    /// Number of transformer blocks.
    pub layers: usize,
    /// Attention heads per block.
    pub heads: usize,
    /// Per-head query/key/value width; `heads * head_dim == latent_dim`.
    pub head_dim: usize,
    /// Hidden width of the per-block MLP.
    pub mlp_hidden: usize,
    /// Number of binary targets (and class tokens, in class-token mode).
    pub num_targets: usize,
    /// Readout strategy.
    pub aggregation: Aggregation,
    /// Dropout probability on each sublayer output during training.
    /// Zero (the default) keeps training fully deterministic.
    #[serde(default)]
    pub dropout: f64,
    /// Layer-normalize the readout vector before the head. Off by default.
    #[serde(default)]
    pub head_layernorm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 768,
            latent_dim: 512,
            layers: 2,
            heads: 8,
            head_dim: 64,
            mlp_hidden: 2048,
            num_targets: 1,
            aggregation: Aggregation::ClassToken,
            dropout: 0.0,
            head_layernorm: false,
        }
    }
}

impl ModelConfig {
    /// Miniature configuration for finite-difference tests: 8-d input,
    /// latent 8, two heads of width 4, two layers, two targets.
    pub fn tiny() -> Self {
        ModelConfig {
            input_dim: 8,
            latent_dim: 8,
            layers: 2,
            heads: 2,
            head_dim: 4,
            mlp_hidden: 16,
            num_targets: 2,
            aggregation: Aggregation::ClassToken,
            dropout: 0.0,
            head_layernorm: false,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |reason: String| Err(ModelError::InvalidConfig { reason });
        if self.input_dim == 0
            || self.latent_dim == 0
            || self.mlp_hidden == 0
            || self.head_dim == 0
        {
            return fail("all dimensions must be at least 1".into());
        }
        if self.layers == 0 {
            return fail("at least one transformer layer is required".into());
        }
        if self.heads == 0 {
            return fail("at least one attention head is required".into());
        }
        if self.num_targets == 0 {
            return fail("at least one target is required".into());
        }
        if self.heads * self.head_dim != self.latent_dim {
            return fail(format!(
                "heads * head_dim must equal latent_dim ({} * {} != {})",
                self.heads, self.head_dim, self.latent_dim
            ));
        }
        if !self.dropout.is_finite() || !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }
}

/// Name and shape of one parameter tensor, in registry order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn num_elements(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Loss, logits and per-tensor gradients from one training step.
#[derive(Debug, Clone)]
pub struct StepOutput<F> {
    pub loss: F,
    pub logits: Array1<F>,
    /// Flattened gradients, aligned with [`Trainable::tensor_specs`] order.
    pub grads: Vec<Vec<F>>,
}

/// Common surface of every trainable aggregator.
///
/// Parameters are exposed as an ordered registry of flat slices so that
/// optimizers and checkpoints can treat all architectures uniformly. The
/// orders of `tensor_specs`, `tensors`, `tensors_mut` and `StepOutput::grads`
/// are guaranteed to agree.
pub trait Trainable<F: Real> {
    fn tensor_specs(&self) -> Vec<TensorSpec>;
    fn tensors(&self) -> Vec<&[F]>;
    fn tensors_mut(&mut self) -> Vec<&mut [F]>;
    fn num_targets(&self) -> usize;

    /// Raw (pre-sigmoid) scores for one bag, one per target.
    fn logits(&self, bag: &Array2<F>) -> Result<Array1<F>, ModelError>;

    /// Forward, masked BCE loss and full analytic gradient for one bag.
    ///
    /// `labels[i] = None` marks target `i` as NA: it contributes neither loss
    /// nor gradient. `rng` drives dropout and is only consulted when the
    /// model's dropout probability is positive.
    fn loss_and_grad(
        &self,
        bag: &Array2<F>,
        labels: &[Option<u8>],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<StepOutput<F>, ModelError>;

    fn num_params(&self) -> usize {
        self.tensor_specs().iter().map(TensorSpec::num_elements).sum()
    }
}

/// Architecture tag plus config, as serialized into checkpoint headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum ArchConfig {
    Transformer(ModelConfig),
    AttentionMil(AttentionMilConfig),
    MeanPool(MeanPoolConfig),
}

/// Any of the three aggregators behind one concrete type.
#[derive(Debug, Clone)]
pub enum PredictorModel<F: Real> {
    Transformer(TransformerModel<F>),
    AttentionMil(AttentionMilModel<F>),
    MeanPool(MeanPoolModel<F>),
}

impl<F: Real> PredictorModel<F> {
    /// Builds a freshly initialized model of the requested architecture.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self, ModelError> {
        Ok(match arch {
            ArchConfig::Transformer(cfg) => {
                PredictorModel::Transformer(TransformerModel::init(cfg.clone(), seed)?)
            }
            ArchConfig::AttentionMil(cfg) => {
                PredictorModel::AttentionMil(AttentionMilModel::init(cfg.clone(), seed)?)
            }
            ArchConfig::MeanPool(cfg) => {
                PredictorModel::MeanPool(MeanPoolModel::init(cfg.clone(), seed)?)
            }
        })
    }

    pub fn arch_config(&self) -> ArchConfig {
        match self {
            PredictorModel::Transformer(m) => ArchConfig::Transformer(m.config.clone()),
            PredictorModel::AttentionMil(m) => ArchConfig::AttentionMil(m.config.clone()),
            PredictorModel::MeanPool(m) => ArchConfig::MeanPool(m.config.clone()),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            PredictorModel::Transformer(m) => m.config.input_dim,
            PredictorModel::AttentionMil(m) => m.config.input_dim,
            PredictorModel::MeanPool(m) => m.config.input_dim,
        }
    }
}

macro_rules! delegate {
    ($self:ident, $m:ident, $call:expr) => {
        match $self {
            PredictorModel::Transformer($m) => $call,
            PredictorModel::AttentionMil($m) => $call,
            PredictorModel::MeanPool($m) => $call,
        }
    };
}

impl<F: Real> Trainable<F> for PredictorModel<F> {
    fn tensor_specs(&self) -> Vec<TensorSpec> {
        delegate!(self, m, m.tensor_specs())
    }
    fn tensors(&self) -> Vec<&[F]> {
        delegate!(self, m, m.tensors())
    }
    fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        delegate!(self, m, m.tensors_mut())
    }
    fn num_targets(&self) -> usize {
        delegate!(self, m, m.num_targets())
    }
    fn logits(&self, bag: &Array2<F>) -> Result<Array1<F>, ModelError> {
        delegate!(self, m, m.logits(bag))
    }
    fn loss_and_grad(
        &self,
        bag: &Array2<F>,
        labels: &[Option<u8>],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<StepOutput<F>, ModelError> {
        delegate!(self, m, m.loss_and_grad(bag, labels, rng))
    }
}

/// Fails with [`ModelError::Numeric`] if any element is NaN or infinite.
pub(crate) fn ensure_finite<F, S, D>(
    arr: &ArrayBase<S, D>,
    context: &str,
) -> Result<(), ModelError>
where
    F: Real,
    S: Data<Elem = F>,
    D: Dimension,
{
    if arr.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::Numeric {
            context: context.to_string(),
        })
    }
}

/// Validates a bag matrix against the expected embedding dimension.
pub(crate) fn check_bag<F: Real>(
    bag: &Array2<F>,
    input_dim: usize,
) -> Result<(), ModelError> {
    if bag.nrows() == 0 {
        return Err(ModelError::EmptyBag);
    }
    if bag.ncols() != input_dim {
        return Err(ModelError::DimMismatch {
            context: "bag embedding dimension".into(),
            expected: input_dim,
            found: bag.ncols(),
        });
    }
    ensure_finite(bag, "bag embeddings")
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;

    /// Central finite differences (epsilon 1e-5) over every element of every
    /// parameter tensor, compared against the analytic gradient. Returns the
    /// worst relative error, with the denominator floored at 1e-4 so that
    /// agreement below 1e-8 absolute is not penalized.
    pub(crate) fn finite_difference_check(
        model: &mut PredictorModel<f64>,
        bag: &Array2<f64>,
        labels: &[Option<u8>],
    ) -> f64 {
        let eps = 1e-5;
        let analytic = model.loss_and_grad(bag, labels, None).unwrap().grads;
        let lens: Vec<usize> = model
            .tensor_specs()
            .iter()
            .map(TensorSpec::num_elements)
            .collect();
        let mut worst = 0.0f64;
        for (ti, &len) in lens.iter().enumerate() {
            for ei in 0..len {
                let old = model.tensors()[ti][ei];
                model.tensors_mut()[ti][ei] = old + eps;
                let plus = eval_loss(model, bag, labels);
                model.tensors_mut()[ti][ei] = old - eps;
                let minus = eval_loss(model, bag, labels);
                model.tensors_mut()[ti][ei] = old;
                let fd = (plus - minus) / (2.0 * eps);
                let a = analytic[ti][ei];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
                worst = worst.max(err);
            }
        }
        worst
    }

    fn eval_loss(model: &PredictorModel<f64>, bag: &Array2<f64>, labels: &[Option<u8>]) -> f64 {
        let logits = model.logits(bag).unwrap();
        bce_with_logits(&logits, labels).unwrap().0
    }
}
