//! Five-fold cross-validation and training-set-size sweeps.
//!
//! Evaluation is patient-level throughout: a patient's score is the mean
//! logit over their bags, and a patient's label comes from their bags'
//! agreeing labels. Fold `i` trains with seed `cfg.seed + i` so folds get
//! independent initializations while the whole protocol stays reproducible.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::folds::{make_folds, subsample_patients};
use super::runner::train_loop;
use super::{TrainBag, TrainConfig, TrainError};
use crate::features::DatasetManifest;
use crate::metrics::{auprc, auroc, ScoredSet};
use crate::model::{PredictorModel, Trainable};
use crate::numeric::Real;

/// Patient counts seen by one fold's run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldCounts {
    pub train_patients: usize,
    pub val_patients: usize,
    pub test_patients: usize,
}

/// Scores for one rotation of the cross-validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub test_auroc: f64,
    pub test_auprc: f64,
    pub val_auroc: f64,
    pub best_iteration: usize,
    pub counts: FoldCounts,
}

/// Aggregate cross-validation result; spreads are population standard
/// deviations over the folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossvalReport {
    pub target: String,
    pub seed: u64,
    pub k: usize,
    pub folds: Vec<FoldReport>,
    pub mean_auroc: f64,
    pub std_auroc: f64,
    pub mean_auprc: f64,
    pub std_auprc: f64,
}

/// Cross-validation result plus the per-fold best models, in fold order.
#[derive(Debug)]
pub struct CrossvalOutcome<F: Real> {
    pub report: CrossvalReport,
    pub models: Vec<PredictorModel<F>>,
}

/// One training run inside a sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub seed: u64,
    pub train_patients: usize,
    pub auroc: f64,
}

/// All repeats at one training-set size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub size: usize,
    pub runs: Vec<SweepRun>,
    pub mean_auroc: f64,
    pub std_auroc: f64,
}

/// Training-set-size sweep over a fixed test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub target: String,
    pub base_seed: u64,
    pub points: Vec<SweepPoint>,
}

fn mean_and_pop_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Patient-level scores for `target_idx`: mean logit over each patient's
/// bags against the label their labeled bags agree on. Patients with no
/// labeled bag, or with conflicting labels, are dropped.
pub fn patient_scores<F, B>(
    model: &PredictorModel<F>,
    bags: &[B],
    target_idx: usize,
) -> Result<ScoredSet, TrainError>
where
    F: Real,
    B: std::borrow::Borrow<TrainBag<F>>,
{
    struct Acc {
        logit_sum: f64,
        bags: usize,
        label: Option<u8>,
        conflict: bool,
    }
    let mut by_patient: BTreeMap<String, Acc> = BTreeMap::new();
    for bag in bags {
        let bag = bag.borrow();
        let logits = model.logits(&bag.embeddings)?;
        let entry = by_patient.entry(bag.patient_id.clone()).or_insert(Acc {
            logit_sum: 0.0,
            bags: 0,
            label: None,
            conflict: false,
        });
        entry.logit_sum += logits[target_idx].to_f64().unwrap();
        entry.bags += 1;
        if let Some(y) = bag.labels.get(target_idx).copied().flatten() {
            match entry.label {
                None => entry.label = Some(y),
                Some(prev) if prev != y => entry.conflict = true,
                _ => {}
            }
        }
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for acc in by_patient.values() {
        if let (Some(y), false) = (acc.label, acc.conflict) {
            scores.push(acc.logit_sum / acc.bags as f64);
            labels.push(y);
        }
    }
    Ok(ScoredSet::new(scores, labels)?)
}

fn select<'a, F: Real>(
    bags: &'a [TrainBag<F>],
    patients: &HashSet<&str>,
) -> Vec<&'a TrainBag<F>> {
    bags.iter()
        .filter(|b| patients.contains(b.patient_id.as_str()))
        .collect()
}

/// Runs the full k-fold protocol for one target.
///
/// Folds come from [`make_folds`] on the manifest; each rotation trains on
/// three folds, selects its checkpoint on the validation fold, and scores
/// the held-out test fold at patient level. Bag labels must be ordered
/// like `manifest.target_names`.
pub fn crossval<F: Real>(
    bags: &[TrainBag<F>],
    manifest: &DatasetManifest,
    target: &str,
    cfg: &TrainConfig,
    k: usize,
    seed: u64,
) -> Result<CrossvalOutcome<F>, TrainError> {
    let target_idx = manifest
        .target_names
        .iter()
        .position(|t| t == target)
        .ok_or_else(|| TrainError::UnknownTarget(target.to_string()))?;
    let plan = make_folds(manifest, target, k, seed)?;

    let mut folds = Vec::with_capacity(k);
    let mut models = Vec::with_capacity(k);
    for i in 0..k {
        let roles = plan.roles(i);
        let train_set: HashSet<&str> = roles.train.iter().map(String::as_str).collect();
        let val_set: HashSet<&str> = roles.val.iter().map(String::as_str).collect();
        let test_set: HashSet<&str> = roles.test.iter().map(String::as_str).collect();
        let train_bags: Vec<&TrainBag<F>> = select(bags, &train_set)
            .into_iter()
            .filter(|b| b.labels.iter().any(Option::is_some))
            .collect();
        let val_bags = select(bags, &val_set);
        let test_bags = select(bags, &test_set);
        if test_bags.is_empty() {
            return Err(TrainError::Validation {
                reason: format!("fold {i} has no test bags"),
            });
        }

        let mut fold_cfg = cfg.clone();
        fold_cfg.seed = cfg.seed + i as u64;
        let outcome = train_loop(&train_bags, &val_bags, &fold_cfg)?;

        let set = patient_scores(&outcome.model, &test_bags, target_idx)?;
        folds.push(FoldReport {
            fold: i,
            test_auroc: auroc(&set)?,
            test_auprc: auprc(&set)?,
            val_auroc: outcome.best_val_auroc,
            best_iteration: outcome.best_iteration,
            counts: FoldCounts {
                train_patients: roles.train.len(),
                val_patients: roles.val.len(),
                test_patients: roles.test.len(),
            },
        });
        models.push(outcome.model);
    }

    let aurocs: Vec<f64> = folds.iter().map(|f| f.test_auroc).collect();
    let auprcs: Vec<f64> = folds.iter().map(|f| f.test_auprc).collect();
    let (mean_auroc, std_auroc) = mean_and_pop_std(&aurocs);
    let (mean_auprc, std_auprc) = mean_and_pop_std(&auprcs);
    Ok(CrossvalOutcome {
        report: CrossvalReport {
            target: target.to_string(),
            seed,
            k,
            folds,
            mean_auroc,
            std_auroc,
            mean_auprc,
            std_auprc,
        },
        models,
    })
}

/// Measures test AUROC as a function of training-pool size.
///
/// For each size and repeat `r`, patients are subsampled from `manifest`
/// with seed `cfg.seed + r` (prefix subsets, so subsets nest across sizes
/// for a fixed repeat), split 4:1 into train and validation folds, trained
/// with the same seed, and scored on the fixed `test` bags at patient
/// level.
pub fn sweep<F: Real>(
    pool: &[TrainBag<F>],
    test: &[TrainBag<F>],
    manifest: &DatasetManifest,
    target: &str,
    cfg: &TrainConfig,
    sizes: &[usize],
    repeats: usize,
) -> Result<SweepReport, TrainError> {
    if repeats == 0 {
        return Err(TrainError::InvalidConfig {
            reason: "sweep needs at least one repeat".to_string(),
        });
    }
    let target_idx = manifest
        .target_names
        .iter()
        .position(|t| t == target)
        .ok_or_else(|| TrainError::UnknownTarget(target.to_string()))?;

    let mut points = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let mut runs = Vec::with_capacity(repeats);
        for r in 0..repeats {
            let run_seed = cfg.seed + r as u64;
            let sub = subsample_patients(manifest, target, &[size], run_seed)?
                .pop()
                .expect("one size in, one manifest out");
            let split = make_folds(&sub, target, 5, run_seed)?;
            let val_set: HashSet<&str> =
                split.folds[0].iter().map(String::as_str).collect();
            let train_set: HashSet<&str> = split.folds[1..]
                .iter()
                .flatten()
                .map(String::as_str)
                .collect();
            let train_bags = select(pool, &train_set);
            let val_bags = select(pool, &val_set);

            let mut run_cfg = cfg.clone();
            run_cfg.seed = run_seed;
            let outcome = train_loop(&train_bags, &val_bags, &run_cfg)?;
            let set = patient_scores(&outcome.model, test, target_idx)?;
            runs.push(SweepRun {
                seed: run_seed,
                train_patients: train_set.len(),
                auroc: auroc(&set)?,
            });
        }
        let aurocs: Vec<f64> = runs.iter().map(|r| r.auroc).collect();
        let (mean_auroc, std_auroc) = mean_and_pop_std(&aurocs);
        points.push(SweepPoint {
            size,
            runs,
            mean_auroc,
            std_auroc,
        });
    }
    Ok(SweepReport {
        target: target.to_string(),
        base_seed: cfg.seed,
        points,
    })
}
