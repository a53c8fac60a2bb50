//! The sequential training loop: batch size one, periodic validation,
//! best-model selection on validation AUROC.

use std::borrow::Borrow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::optim::{adam_step, adamw_step, one_cycle_lr, AdamState};
use super::{OptimizerKind, Schedule, TrainBag, TrainConfig, TrainError};
use crate::metrics::{auroc, MetricError, ScoredSet};
use crate::model::{ModelError, PredictorModel, Trainable};
use crate::numeric::Real;

/// One validation measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPoint {
    pub iteration: usize,
    pub val_auroc: f64,
}

/// Result of a full training run.
#[derive(Debug)]
pub struct TrainOutcome<F: Real> {
    /// Model with its parameters restored to the best evaluation point.
    pub model: PredictorModel<F>,
    pub best_iteration: usize,
    pub best_val_auroc: f64,
    /// Last optimization step reached (equals `epochs * train.len()` unless
    /// the run aborted early).
    pub final_iteration: usize,
    pub evaluations: Vec<EvalPoint>,
    /// Steps whose gradients were non-finite and were therefore skipped.
    pub skipped_steps: usize,
    /// True when a numeric error cut the run short; the returned model is
    /// then the best checkpoint reached before the failure.
    pub aborted: bool,
    /// Per-step training losses, in step order.
    pub losses: Vec<f64>,
}

/// Mean AUROC over the targets for which the validation bags carry both
/// classes, computed on raw logits. Targets with a single class are
/// skipped; if every target is single-class the metric is undefined.
pub fn validation_auroc<F: Real, B: Borrow<TrainBag<F>>>(
    model: &PredictorModel<F>,
    val: &[B],
) -> Result<f64, TrainError> {
    let targets = model.num_targets();
    let mut scores: Vec<Vec<f64>> = vec![Vec::new(); targets];
    let mut labels: Vec<Vec<u8>> = vec![Vec::new(); targets];
    for bag in val {
        let bag = bag.borrow();
        let logits = model.logits(&bag.embeddings)?;
        for t in 0..targets {
            if let Some(y) = bag.labels[t] {
                scores[t].push(logits[t].to_f64().unwrap());
                labels[t].push(y);
            }
        }
    }
    let mut sum = 0.0;
    let mut defined = 0usize;
    for t in 0..targets {
        let has_pos = labels[t].contains(&1);
        let has_neg = labels[t].contains(&0);
        if has_pos && has_neg {
            let set = ScoredSet::new(scores[t].clone(), labels[t].clone())?;
            sum += auroc(&set)?;
            defined += 1;
        }
    }
    if defined == 0 {
        return Err(TrainError::Validation {
            reason: "no validation target has both classes".to_string(),
        });
    }
    Ok(sum / defined as f64)
}

fn snapshot<F: Real>(model: &PredictorModel<F>) -> Vec<Vec<F>> {
    model.tensors().iter().map(|s| s.to_vec()).collect()
}

fn restore<F: Real>(model: &mut PredictorModel<F>, saved: &[Vec<F>]) {
    for (slot, src) in model.tensors_mut().into_iter().zip(saved) {
        slot.copy_from_slice(src);
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
fn clip_gradients<F: Real>(grads: &mut [Vec<F>], max_norm: f64) {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &v in g {
            let v = v.to_f64().unwrap_or(f64::NAN);
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm.is_finite() && norm > max_norm {
        let scale = F::from_f64(max_norm / norm).unwrap();
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v = *v * scale;
            }
        }
    }
}

fn check_bags<F: Real, B: Borrow<TrainBag<F>>>(
    bags: &[B],
    role: &str,
    input_dim: usize,
    targets: usize,
    require_label: bool,
) -> Result<(), TrainError> {
    if bags.is_empty() {
        return Err(TrainError::Validation {
            reason: format!("{role} set is empty"),
        });
    }
    for bag in bags {
        let bag = bag.borrow();
        if bag.embeddings.nrows() == 0 {
            return Err(TrainError::Validation {
                reason: format!("{role} bag {} has no embeddings", bag.id),
            });
        }
        if bag.embeddings.ncols() != input_dim {
            return Err(TrainError::Validation {
                reason: format!(
                    "{role} bag {} has dimension {}, model expects {input_dim}",
                    bag.id,
                    bag.embeddings.ncols()
                ),
            });
        }
        if bag.labels.len() != targets {
            return Err(TrainError::Validation {
                reason: format!(
                    "{role} bag {} has {} labels, model has {targets} targets",
                    bag.id,
                    bag.labels.len()
                ),
            });
        }
        if require_label && bag.labels.iter().all(Option::is_none) {
            return Err(TrainError::Validation {
                reason: format!("{role} bag {} has no labeled target", bag.id),
            });
        }
    }
    Ok(())
}

fn shuffle_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Trains `cfg.model` on `train`, evaluating on `val` every
/// `eval_interval` steps (and always once at the end of the run), and
/// returns the parameters that scored the highest validation AUROC.
/// Ties keep the earlier iteration. The whole run is deterministic in
/// `cfg.seed`: one generator drives initialization, the per-epoch
/// shuffles, and dropout.
///
/// A non-finite loss or forward pass aborts the run and returns the best
/// checkpoint reached so far with `aborted` set; a step whose gradients
/// are non-finite is skipped and counted instead.
pub fn train_loop<F, B, C>(
    train: &[B],
    val: &[C],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<F>, TrainError>
where
    F: Real,
    B: Borrow<TrainBag<F>>,
    C: Borrow<TrainBag<F>>,
{
    cfg.validate()?;
    let mut model: PredictorModel<F> = PredictorModel::init(&cfg.model, cfg.seed)?;
    check_bags(train, "train", model.input_dim(), model.num_targets(), true)?;
    check_bags(val, "val", model.input_dim(), model.num_targets(), false)?;

    let total_steps = cfg.epochs * train.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new(&model.tensor_specs());

    let mut evaluations: Vec<EvalPoint> = Vec::new();
    let mut losses: Vec<f64> = Vec::with_capacity(total_steps);
    let mut best: Option<(usize, f64, Vec<Vec<F>>)> = None;
    let mut skipped_steps = 0usize;
    let mut aborted = false;
    let mut iteration = 0usize;

    macro_rules! evaluate {
        () => {{
            match validation_auroc(&model, val) {
                Ok(score) => {
                    evaluations.push(EvalPoint {
                        iteration,
                        val_auroc: score,
                    });
                    let better = best
                        .as_ref()
                        .map_or(true, |(_, best_score, _)| score > *best_score);
                    if better {
                        best = Some((iteration, score, snapshot(&model)));
                    }
                    Ok(())
                }
                Err(e) => Err(e),
            }
        }};
    }

    'run: for _epoch in 0..cfg.epochs {
        let order = shuffle_indices(train.len(), &mut rng);
        for idx in order {
            let bag = train[idx].borrow();
            let lr = match cfg.schedule {
                Schedule::Constant => cfg.lr,
                Schedule::OneCycle {
                    max_lr,
                    warmup_frac,
                } => one_cycle_lr(iteration, total_steps, max_lr, warmup_frac),
            };
            iteration += 1;

            let step = match model.loss_and_grad(&bag.embeddings, &bag.labels, Some(&mut rng)) {
                Ok(step) => step,
                Err(ModelError::Numeric { .. }) => {
                    aborted = true;
                    break 'run;
                }
                Err(e) => return Err(e.into()),
            };
            losses.push(step.loss.to_f64().unwrap());

            let mut grads = step.grads;
            if let Some(max_norm) = cfg.grad_clip {
                clip_gradients(&mut grads, max_norm);
            }
            let mut params = model.tensors_mut();
            let applied = match cfg.optimizer {
                OptimizerKind::AdamW => {
                    adamw_step(&mut params, &grads, &mut state, lr, cfg.weight_decay)
                }
                OptimizerKind::Adam => {
                    adam_step(&mut params, &grads, &mut state, lr, cfg.weight_decay)
                }
            };
            if applied.is_err() {
                skipped_steps += 1;
            }

            if iteration % cfg.eval_interval == 0 {
                if let Err(e) = evaluate!() {
                    match (&e, best.is_some()) {
                        (TrainError::Model(ModelError::Numeric { .. }), true)
                        | (TrainError::Metric(MetricError::NonFiniteScore { .. }), true) => {
                            aborted = true;
                            break 'run;
                        }
                        _ => return Err(e),
                    }
                }
            }
        }
    }

    if !aborted && evaluations.last().map(|e| e.iteration) != Some(iteration) {
        evaluate!()?;
    }
    let (best_iteration, best_val_auroc, best_params) = best.ok_or_else(|| {
        TrainError::Validation {
            reason: "run produced no valid evaluation".to_string(),
        }
    })?;
    restore(&mut model, &best_params);

    Ok(TrainOutcome {
        model,
        best_iteration,
        best_val_auroc,
        final_iteration: iteration,
        evaluations,
        skipped_steps,
        aborted,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        save_checkpoint, ArchConfig, MeanPoolConfig, ModelConfig,
    };
    use ndarray::Array2;
    use rand_distr::{Distribution, StandardNormal};

    fn tiny_arch() -> ArchConfig {
        let mut cfg = ModelConfig::tiny();
        cfg.num_targets = 1;
        ArchConfig::Transformer(cfg)
    }

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            optimizer: OptimizerKind::AdamW,
            lr: 1e-3,
            weight_decay: 0.0,
            epochs: 2,
            eval_interval: 3,
            schedule: Schedule::Constant,
            seed: 7,
            grad_clip: None,
            model: tiny_arch(),
        }
    }

    /// Bags whose mean embedding points along +e0 for positives and -e0
    /// for negatives, easy enough for any aggregator to separate.
    fn separable_bags(count: usize, seed: u64, dim: usize) -> Vec<TrainBag<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|i| {
                let label = (i % 2) as u8;
                let shift = if label == 1 { 1.0 } else { -1.0 };
                let rows = 4 + (i % 3);
                let bag = Array2::from_shape_fn((rows, dim), |(_, j)| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    0.3 * noise + if j == 0 { shift } else { 0.0 }
                });
                TrainBag::new(
                    format!("bag{i}"),
                    format!("P{i}"),
                    vec![Some(label)],
                    bag,
                )
            })
            .collect()
    }

    #[test]
    fn eval_interval_beyond_total_steps_evaluates_exactly_once() {
        let train = separable_bags(4, 0, 8);
        let val = separable_bags(6, 1, 8);
        let mut cfg = tiny_train_config();
        cfg.epochs = 1;
        cfg.eval_interval = 1000;
        let out = train_loop(&train, &val, &cfg).unwrap();
        assert_eq!(out.evaluations.len(), 1);
        assert_eq!(out.evaluations[0].iteration, 4);
        assert_eq!(out.final_iteration, 4);
        assert_eq!(out.best_iteration, 4);
    }

    #[test]
    fn same_seed_gives_bitwise_identical_checkpoints() {
        let train = separable_bags(6, 3, 8);
        let val = separable_bags(6, 4, 8);
        let cfg = tiny_train_config();
        let a = train_loop(&train, &val, &cfg).unwrap();
        let b = train_loop(&train, &val, &cfg).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.evaluations, b.evaluations);

        let dir = tempfile::tempdir().unwrap();
        let pa = dir.path().join("a.ckpt");
        let pb = dir.path().join("b.ckpt");
        save_checkpoint(&pa, &a.model, a.best_iteration as u64, a.best_val_auroc, cfg.seed)
            .unwrap();
        save_checkpoint(&pb, &b.model, b.best_iteration as u64, b.best_val_auroc, cfg.seed)
            .unwrap();
        let bytes_a = std::fs::read(&pa).unwrap();
        let bytes_b = std::fs::read(&pb).unwrap();
        assert_eq!(bytes_a, bytes_b);
    }

    #[test]
    fn different_seeds_diverge() {
        let train = separable_bags(6, 3, 8);
        let val = separable_bags(6, 4, 8);
        let mut cfg = tiny_train_config();
        let a = train_loop(&train, &val, &cfg).unwrap();
        cfg.seed = 8;
        let b = train_loop(&train, &val, &cfg).unwrap();
        assert_ne!(a.losses, b.losses);
    }

    #[test]
    fn loss_decreases_on_a_single_bag_for_most_seeds() {
        // Smoke property: 50 steps of Adam on one repeated bag should cut
        // the loss for the median seed.
        let mut drops = Vec::new();
        for seed in 0..5u64 {
            let bags = separable_bags(1, seed, 8);
            let val = separable_bags(2, 99, 8);
            let mut cfg = tiny_train_config();
            cfg.seed = seed;
            cfg.lr = 1e-3;
            cfg.epochs = 50;
            cfg.eval_interval = 1_000_000;
            let out = train_loop(&bags, &val, &cfg).unwrap();
            drops.push(out.losses[0] - out.losses.last().unwrap());
        }
        drops.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = drops[drops.len() / 2];
        assert!(median > 0.0, "median loss change {median:.6} not a decrease");
    }

    #[test]
    fn best_checkpoint_prefers_earliest_on_ties() {
        // Two validation bags with identical embeddings but opposite
        // labels always receive identical logits, so every evaluation is
        // exactly 0.5 (tie credit) no matter the parameters. The earliest
        // evaluation must win every such tie.
        let train = separable_bags(4, 0, 8);
        let shared = Array2::from_elem((3, 8), 0.25);
        let val = vec![
            TrainBag::new("v0", "Q0", vec![Some(0)], shared.clone()),
            TrainBag::new("v1", "Q1", vec![Some(1)], shared),
        ];
        let mut cfg = tiny_train_config();
        cfg.epochs = 3;
        cfg.eval_interval = 2;
        let out = train_loop(&train, &val, &cfg).unwrap();
        assert!(out.evaluations.len() > 1);
        let first = &out.evaluations[0];
        assert_eq!(out.best_iteration, first.iteration);
        for e in &out.evaluations {
            assert_eq!(e.val_auroc, 0.5);
        }
        assert_eq!(out.best_val_auroc, 0.5);
    }

    #[test]
    fn returned_model_carries_best_parameters() {
        let train = separable_bags(8, 5, 8);
        let val = separable_bags(8, 6, 8);
        let mut cfg = tiny_train_config();
        cfg.epochs = 4;
        cfg.eval_interval = 5;
        let out = train_loop(&train, &val, &cfg).unwrap();
        let rescored = validation_auroc(&out.model, &val).unwrap();
        assert!(
            (rescored - out.best_val_auroc).abs() < 1e-12,
            "restored model scores {rescored}, recorded best {}",
            out.best_val_auroc
        );
    }

    #[test]
    fn empty_train_set_is_rejected() {
        let val = separable_bags(4, 1, 8);
        let cfg = tiny_train_config();
        let empty: Vec<TrainBag<f64>> = Vec::new();
        let err = train_loop(&empty, &val, &cfg).unwrap_err();
        assert!(matches!(err, TrainError::Validation { .. }));
    }

    #[test]
    fn dimension_mismatch_is_rejected_before_training() {
        let train = separable_bags(4, 1, 7);
        let val = separable_bags(4, 2, 7);
        let cfg = tiny_train_config();
        let err = train_loop(&train, &val, &cfg).unwrap_err();
        assert!(matches!(err, TrainError::Validation { .. }), "{err}");
    }

    #[test]
    fn all_na_train_bag_is_rejected() {
        let mut train = separable_bags(4, 1, 8);
        train[2].labels = vec![None];
        let val = separable_bags(4, 2, 8);
        let cfg = tiny_train_config();
        let err = train_loop(&train, &val, &cfg).unwrap_err();
        assert!(matches!(err, TrainError::Validation { .. }));
    }

    #[test]
    fn single_class_validation_is_an_error() {
        let train = separable_bags(4, 1, 8);
        let val: Vec<TrainBag<f64>> = separable_bags(4, 2, 8)
            .into_iter()
            .map(|mut b| {
                b.labels = vec![Some(1)];
                b
            })
            .collect();
        let cfg = tiny_train_config();
        let err = train_loop(&train, &val, &cfg).unwrap_err();
        assert!(matches!(err, TrainError::Validation { .. }));
    }

    #[test]
    fn one_cycle_schedule_runs_end_to_end() {
        let train = separable_bags(6, 3, 8);
        let val = separable_bags(6, 4, 8);
        let mut cfg = tiny_train_config();
        cfg.optimizer = OptimizerKind::Adam;
        cfg.weight_decay = 1e-2;
        cfg.schedule = Schedule::OneCycle {
            max_lr: 1e-3,
            warmup_frac: 0.25,
        };
        let out = train_loop(&train, &val, &cfg).unwrap();
        assert_eq!(out.final_iteration, 12);
        assert!(!out.aborted);
    }

    #[test]
    fn mean_pool_arch_trains_too() {
        let train = separable_bags(6, 3, 8);
        let val = separable_bags(6, 4, 8);
        let mut cfg = tiny_train_config();
        cfg.model = ArchConfig::MeanPool(MeanPoolConfig {
            input_dim: 8,
            num_targets: 1,
        });
        cfg.lr = 2e-2;
        cfg.epochs = 10;
        let out = train_loop(&train, &val, &cfg).unwrap();
        assert!(
            out.best_val_auroc >= 0.9,
            "mean-pool stuck at AUROC {:.3} on separable bags",
            out.best_val_auroc
        );
    }

    #[test]
    fn grad_clip_caps_the_global_norm() {
        let mut grads = vec![vec![3.0f64, 4.0], vec![0.0, 0.0]];
        clip_gradients(&mut grads, 1.0);
        let norm: f64 = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        // Already-small gradients pass through untouched.
        let mut small = vec![vec![0.1f64, 0.2]];
        let before = small.clone();
        clip_gradients(&mut small, 1.0);
        assert_eq!(small, before);
    }

    #[test]
    fn validation_auroc_averages_only_defined_targets() {
        let mut cfg = ModelConfig::tiny();
        cfg.num_targets = 2;
        let model: PredictorModel<f64> =
            PredictorModel::init(&ArchConfig::Transformer(cfg), 0).unwrap();
        // Target 0 has both classes; target 1 is all-positive and must be
        // skipped rather than averaged in as a degenerate value.
        let bags: Vec<TrainBag<f64>> = (0..6)
            .map(|i| {
                let bag = Array2::from_shape_fn((3, 8), |(r, c)| {
                    ((i + r * 3 + c) as f64 * 0.37).sin()
                });
                TrainBag::new(
                    format!("b{i}"),
                    format!("P{i}"),
                    vec![Some((i % 2) as u8), Some(1)],
                    bag,
                )
            })
            .collect();
        let score = validation_auroc(&model, &bags).unwrap();
        let logits: Vec<f64> = bags
            .iter()
            .map(|b| model.logits(&b.embeddings).unwrap()[0])
            .collect();
        let labels: Vec<u8> = (0..6).map(|i| (i % 2) as u8).collect();
        let expected = auroc(&ScoredSet::new(logits, labels).unwrap()).unwrap();
        assert!((score - expected).abs() < 1e-12);
    }
}
