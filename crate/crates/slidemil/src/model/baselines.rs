//! Baseline aggregators: gated attention pooling and plain mean pooling.
//!
//! AttentionMIL scores each patch with `e_i = w . tanh(V . emb_i)`, softmaxes
//! the scores into weights, and classifies the weighted sum of embeddings
//! with a linear head. Duplicating every patch k times rescales all softmax
//! weights by 1/k and leaves the bag vector, and hence the logits, exactly
//! unchanged. Mean pooling drops the attention branch entirely.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::{softmax_backward, softmax_inplace};
use super::loss::bce_with_logits;
use super::{
    check_bag, ensure_finite, ModelError, StepOutput, TensorSpec, Trainable,
};
use crate::numeric::{c, Real};

/// Hyperparameters of the gated-attention baseline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionMilConfig {
    pub input_dim: usize,
    /// Width of the tanh attention branch.
    pub attn_dim: usize,
    pub num_targets: usize,
}

impl Default for AttentionMilConfig {
    fn default() -> Self {
        AttentionMilConfig {
            input_dim: 768,
            attn_dim: 128,
            num_targets: 1,
        }
    }
}

impl AttentionMilConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 || self.attn_dim == 0 || self.num_targets == 0 {
            return Err(ModelError::InvalidConfig {
                reason: "input_dim, attn_dim and num_targets must all be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// Attention-pooling MIL classifier.
#[derive(Debug, Clone)]
pub struct AttentionMilModel<F: Real> {
    pub config: AttentionMilConfig,
    /// `input_dim x attn_dim` attention projection.
    pub gate_v: Array2<F>,
    /// `attn_dim` score vector.
    pub gate_w: Array1<F>,
    /// `num_targets x input_dim` head.
    pub head_w: Array2<F>,
    pub head_b: Array1<F>,
}

fn uniform_matrix<F: Real>(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    fan_in: usize,
) -> Array2<F> {
    let bound = c::<F>(1.0 / (fan_in as f64).sqrt());
    Array2::from_shape_simple_fn((rows, cols), || F::uniform(rng, -bound, bound))
}

impl<F: Real> AttentionMilModel<F> {
    pub fn init(config: AttentionMilConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gate_v = uniform_matrix(&mut rng, config.input_dim, config.attn_dim, config.input_dim);
        let w_bound = c::<F>(1.0 / (config.attn_dim as f64).sqrt());
        let gate_w =
            Array1::from_shape_simple_fn(config.attn_dim, || F::uniform(&mut rng, -w_bound, w_bound));
        let head_w = uniform_matrix(
            &mut rng,
            config.num_targets,
            config.input_dim,
            config.input_dim,
        );
        Ok(AttentionMilModel {
            head_b: Array1::zeros(config.num_targets),
            config,
            gate_v,
            gate_w,
            head_w,
        })
    }

    /// Forward pass returning logits, attention weights and intermediates.
    fn forward_parts(
        &self,
        bag: &Array2<F>,
    ) -> Result<(Array1<F>, Array1<F>, Array2<F>, Array1<F>), ModelError> {
        check_bag(bag, self.config.input_dim)?;
        let scores_hidden = bag.dot(&self.gate_v).mapv_into(|v| v.tanh());
        let mut weights = scores_hidden.dot(&self.gate_w);
        softmax_inplace(&mut weights);
        let bag_vector = bag.t().dot(&weights);
        let logits = self.head_w.dot(&bag_vector) + &self.head_b;
        ensure_finite(&logits, "attention_mil logits")?;
        Ok((logits, weights, scores_hidden, bag_vector))
    }

    /// Softmax attention weights per patch, for inspection.
    pub fn attention_weights(&self, bag: &Array2<F>) -> Result<Array1<F>, ModelError> {
        Ok(self.forward_parts(bag)?.1)
    }
}

impl<F: Real> Trainable<F> for AttentionMilModel<F> {
    fn tensor_specs(&self) -> Vec<TensorSpec> {
        vec![
            TensorSpec {
                name: "gate_v".into(),
                shape: vec![self.config.input_dim, self.config.attn_dim],
            },
            TensorSpec {
                name: "gate_w".into(),
                shape: vec![self.config.attn_dim],
            },
            TensorSpec {
                name: "head_w".into(),
                shape: vec![self.config.num_targets, self.config.input_dim],
            },
            TensorSpec {
                name: "head_b".into(),
                shape: vec![self.config.num_targets],
            },
        ]
    }

    fn tensors(&self) -> Vec<&[F]> {
        vec![
            self.gate_v.as_slice().unwrap(),
            self.gate_w.as_slice().unwrap(),
            self.head_w.as_slice().unwrap(),
            self.head_b.as_slice().unwrap(),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        vec![
            self.gate_v.as_slice_mut().unwrap(),
            self.gate_w.as_slice_mut().unwrap(),
            self.head_w.as_slice_mut().unwrap(),
            self.head_b.as_slice_mut().unwrap(),
        ]
    }

    fn num_targets(&self) -> usize {
        self.config.num_targets
    }

    fn logits(&self, bag: &Array2<F>) -> Result<Array1<F>, ModelError> {
        Ok(self.forward_parts(bag)?.0)
    }

    fn loss_and_grad(
        &self,
        bag: &Array2<F>,
        labels: &[Option<u8>],
        _rng: Option<&mut ChaCha8Rng>,
    ) -> Result<StepOutput<F>, ModelError> {
        let (logits, weights, scores_hidden, bag_vector) = self.forward_parts(bag)?;
        let (loss, dlogits) = bce_with_logits(&logits, labels)?;

        // Head.
        let mut dhead_w = Array2::<F>::zeros(self.head_w.raw_dim());
        for i in 0..self.config.num_targets {
            for j in 0..self.config.input_dim {
                dhead_w[[i, j]] = dlogits[i] * bag_vector[j];
            }
        }
        let dhead_b = dlogits.clone();
        let dbag_vector = self.head_w.t().dot(&dlogits);

        // Through the weighted sum and the softmax.
        let dweights = bag.dot(&dbag_vector);
        let dscores = softmax_backward(&weights, dweights);

        // Through the tanh gate.
        let dgate_w = scores_hidden.t().dot(&dscores);
        let mut dhidden = Array2::<F>::zeros(scores_hidden.raw_dim());
        for (i, ds) in dscores.iter().enumerate() {
            for j in 0..self.config.attn_dim {
                let t = scores_hidden[[i, j]];
                dhidden[[i, j]] = *ds * self.gate_w[j] * (F::one() - t * t);
            }
        }
        let dgate_v = bag.t().dot(&dhidden);

        Ok(StepOutput {
            loss,
            logits,
            grads: vec![
                dgate_v.into_raw_vec_and_offset().0,
                dgate_w.to_vec(),
                dhead_w.into_raw_vec_and_offset().0,
                dhead_b.to_vec(),
            ],
        })
    }
}

/// Hyperparameters of the mean-pooling baseline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeanPoolConfig {
    pub input_dim: usize,
    pub num_targets: usize,
}

impl Default for MeanPoolConfig {
    fn default() -> Self {
        MeanPoolConfig {
            input_dim: 768,
            num_targets: 1,
        }
    }
}

impl MeanPoolConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 || self.num_targets == 0 {
            return Err(ModelError::InvalidConfig {
                reason: "input_dim and num_targets must both be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// Mean-over-patches classifier: the weakest sensible aggregator, kept as a
/// yardstick for how much the attention mechanisms actually buy.
#[derive(Debug, Clone)]
pub struct MeanPoolModel<F: Real> {
    pub config: MeanPoolConfig,
    pub head_w: Array2<F>,
    pub head_b: Array1<F>,
}

impl<F: Real> MeanPoolModel<F> {
    pub fn init(config: MeanPoolConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head_w = uniform_matrix(
            &mut rng,
            config.num_targets,
            config.input_dim,
            config.input_dim,
        );
        Ok(MeanPoolModel {
            head_b: Array1::zeros(config.num_targets),
            config,
            head_w,
        })
    }

    fn mean_vector(&self, bag: &Array2<F>) -> Result<Array1<F>, ModelError> {
        check_bag(bag, self.config.input_dim)?;
        let inv_n = F::one() / c::<F>(bag.nrows() as f64);
        let mut mean = Array1::zeros(self.config.input_dim);
        for row in bag.rows() {
            mean += &row;
        }
        mean.mapv_inplace(|v| v * inv_n);
        Ok(mean)
    }
}

impl<F: Real> Trainable<F> for MeanPoolModel<F> {
    fn tensor_specs(&self) -> Vec<TensorSpec> {
        vec![
            TensorSpec {
                name: "head_w".into(),
                shape: vec![self.config.num_targets, self.config.input_dim],
            },
            TensorSpec {
                name: "head_b".into(),
                shape: vec![self.config.num_targets],
            },
        ]
    }

    fn tensors(&self) -> Vec<&[F]> {
        vec![
            self.head_w.as_slice().unwrap(),
            self.head_b.as_slice().unwrap(),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        vec![
            self.head_w.as_slice_mut().unwrap(),
            self.head_b.as_slice_mut().unwrap(),
        ]
    }

    fn num_targets(&self) -> usize {
        self.config.num_targets
    }

    fn logits(&self, bag: &Array2<F>) -> Result<Array1<F>, ModelError> {
        let mean = self.mean_vector(bag)?;
        let logits = self.head_w.dot(&mean) + &self.head_b;
        ensure_finite(&logits, "mean_pool logits")?;
        Ok(logits)
    }

    fn loss_and_grad(
        &self,
        bag: &Array2<F>,
        labels: &[Option<u8>],
        _rng: Option<&mut ChaCha8Rng>,
    ) -> Result<StepOutput<F>, ModelError> {
        let mean = self.mean_vector(bag)?;
        let logits = self.head_w.dot(&mean) + &self.head_b;
        ensure_finite(&logits, "mean_pool logits")?;
        let (loss, dlogits) = bce_with_logits(&logits, labels)?;
        let mut dhead_w = Array2::<F>::zeros(self.head_w.raw_dim());
        for i in 0..self.config.num_targets {
            for j in 0..self.config.input_dim {
                dhead_w[[i, j]] = dlogits[i] * mean[j];
            }
        }
        Ok(StepOutput {
            loss,
            logits,
            grads: vec![dhead_w.into_raw_vec_and_offset().0, dlogits.to_vec()],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests_support::finite_difference_check;
    use crate::model::PredictorModel;
    use ndarray::concatenate;
    use ndarray::Axis;
    use rand::Rng;

    fn small_config() -> AttentionMilConfig {
        AttentionMilConfig {
            input_dim: 6,
            attn_dim: 4,
            num_targets: 2,
        }
    }

    fn random_bag(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn single_patch_bag_uses_the_embedding_directly() {
        let model = AttentionMilModel::<f64>::init(small_config(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bag = random_bag(&mut rng, 1, 6);
        let weights = model.attention_weights(&bag).unwrap();
        assert_eq!(weights.len(), 1);
        assert!((weights[0] - 1.0).abs() < 1e-15);

        let logits = model.logits(&bag).unwrap();
        let direct = model.head_w.dot(&bag.row(0)) + &model.head_b;
        for (a, b) in logits.iter().zip(direct.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicating_every_patch_leaves_logits_unchanged() {
        let model = AttentionMilModel::<f64>::init(small_config(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for k in [2usize, 3, 5] {
            let bag = random_bag(&mut rng, 7, 6);
            let copies: Vec<_> = (0..k).map(|_| bag.view()).collect();
            let doubled = concatenate(Axis(0), &copies).unwrap();
            let a = model.logits(&bag).unwrap();
            let b = model.logits(&doubled).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() <= 1e-9, "k={k}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn attention_weights_are_a_distribution() {
        let model = AttentionMilModel::<f64>::init(small_config(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bag = random_bag(&mut rng, 11, 6);
        let weights = model.attention_weights(&bag).unwrap();
        assert!(weights.iter().all(|&w| w >= 0.0));
        assert!((weights.sum() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn attention_mil_is_permutation_invariant() {
        let model = AttentionMilModel::<f64>::init(small_config(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let bag = random_bag(&mut rng, 9, 6);
        let mut reversed = Array2::zeros(bag.raw_dim());
        for i in 0..9 {
            reversed.row_mut(i).assign(&bag.row(8 - i));
        }
        let a = model.logits(&bag).unwrap();
        let b = model.logits(&reversed).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn attention_mil_passes_finite_difference_check() {
        let model = AttentionMilModel::<f64>::init(small_config(), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let bag = random_bag(&mut rng, 5, 6);
        let labels = [Some(1), None];
        let worst =
            finite_difference_check(&mut PredictorModel::AttentionMil(model), &bag, &labels);
        assert!(worst <= 1e-4, "max relative gradient error {worst}");
    }

    #[test]
    fn golden_attention_mil_logits_are_stable() {
        let model = AttentionMilModel::<f64>::init(small_config(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let bag = random_bag(&mut rng, 4, 6);
        let logits = model.logits(&bag).unwrap();
        let expected: [f64; 2] = include!("golden_amil.in");
        for (got, want) in logits.iter().zip(expected.iter()) {
            assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn mean_pool_identical_patches_match_single_patch() {
        let cfg = MeanPoolConfig {
            input_dim: 6,
            num_targets: 2,
        };
        let model = MeanPoolModel::<f64>::init(cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let one = random_bag(&mut rng, 1, 6);
        let repeated = concatenate(Axis(0), &[one.view(); 8]).unwrap();
        let a = model.logits(&one).unwrap();
        let b = model.logits(&repeated).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn mean_pool_is_permutation_invariant() {
        let cfg = MeanPoolConfig {
            input_dim: 5,
            num_targets: 1,
        };
        let model = MeanPoolModel::<f64>::init(cfg, 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let bag = random_bag(&mut rng, 6, 5);
        let mut reversed = Array2::zeros(bag.raw_dim());
        for i in 0..6 {
            reversed.row_mut(i).assign(&bag.row(5 - i));
        }
        let a = model.logits(&bag).unwrap();
        let b = model.logits(&reversed).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn mean_pool_passes_finite_difference_check() {
        let cfg = MeanPoolConfig {
            input_dim: 6,
            num_targets: 2,
        };
        let model = MeanPoolModel::<f64>::init(cfg, 15).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let bag = random_bag(&mut rng, 5, 6);
        let labels = [Some(0), Some(1)];
        let worst = finite_difference_check(&mut PredictorModel::MeanPool(model), &bag, &labels);
        assert!(worst <= 1e-4, "max relative gradient error {worst}");
    }

    #[test]
    fn golden_mean_pool_logits_are_stable() {
        let cfg = MeanPoolConfig {
            input_dim: 6,
            num_targets: 2,
        };
        let model = MeanPoolModel::<f64>::init(cfg, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let bag = random_bag(&mut rng, 4, 6);
        let logits = model.logits(&bag).unwrap();
        let expected: [f64; 2] = include!("golden_mpool.in");
        for (got, want) in logits.iter().zip(expected.iter()) {
            assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(AttentionMilModel::<f64>::init(
            AttentionMilConfig {
                attn_dim: 0,
                ..AttentionMilConfig::default()
            },
            0
        )
        .is_err());
        assert!(MeanPoolModel::<f64>::init(
            MeanPoolConfig {
                num_targets: 0,
                ..MeanPoolConfig::default()
            },
            0
        )
        .is_err());
    }
}
