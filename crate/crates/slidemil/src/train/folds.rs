//! Patient-level fold construction and stratified subsampling.
//!
//! Folds are built per target: patients whose label for the target is NA
//! (or whose slides disagree) are left out entirely, positives and
//! negatives are shuffled separately with a seeded generator, and each
//! class is dealt round-robin across the folds. That keeps per-class
//! counts within one of each other across folds, and every patient's
//! slides stay on one side of every split.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::features::DatasetManifest;

/// A k-fold partition of labeled patients.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub target: String,
    pub seed: u64,
    /// `folds[i]` lists the patient ids of fold `i`.
    pub folds: Vec<Vec<String>>,
}

/// Patient ids for one rotation of the plan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldRoles {
    pub test: Vec<String>,
    pub val: Vec<String>,
    pub train: Vec<String>,
}

impl SplitPlan {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    /// Roles for rotation `i`: fold `i` tests, fold `i+1` (mod k)
    /// validates, the remaining folds train.
    pub fn roles(&self, i: usize) -> FoldRoles {
        let k = self.k();
        let val_idx = (i + 1) % k;
        let mut train = Vec::new();
        for (j, fold) in self.folds.iter().enumerate() {
            if j != i && j != val_idx {
                train.extend(fold.iter().cloned());
            }
        }
        FoldRoles {
            test: self.folds[i].clone(),
            val: self.folds[val_idx].clone(),
            train,
        }
    }
}

fn seeded_shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Splits the labeled patients of `manifest` by `target` class.
fn patients_by_class(
    manifest: &DatasetManifest,
    target: &str,
) -> Result<(Vec<String>, Vec<String>), TrainError> {
    if !manifest.target_names.iter().any(|t| t == target) {
        return Err(TrainError::UnknownTarget(target.to_string()));
    }
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for patient in manifest.patients() {
        match manifest.patient_label(&patient, target) {
            Some(1) => positives.push(patient),
            Some(0) => negatives.push(patient),
            _ => {}
        }
    }
    Ok((positives, negatives))
}

/// Builds a stratified, patient-level k-fold split.
///
/// Requires at least `k` labeled patients in each class; positives and
/// negatives are shuffled independently and dealt round-robin, so per-fold
/// positive counts (and negative counts) differ by at most one.
pub fn make_folds(
    manifest: &DatasetManifest,
    target: &str,
    k: usize,
    seed: u64,
) -> Result<SplitPlan, TrainError> {
    if k < 2 {
        return Err(TrainError::InvalidConfig {
            reason: format!("need at least 2 folds, got {k}"),
        });
    }
    let (mut positives, mut negatives) = patients_by_class(manifest, target)?;
    for (class, list) in [(1u8, &positives), (0u8, &negatives)] {
        if list.len() < k {
            return Err(TrainError::Stratification {
                class,
                count: list.len(),
                needed: k,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    seeded_shuffle(&mut positives, &mut rng);
    seeded_shuffle(&mut negatives, &mut rng);

    let mut folds = vec![Vec::new(); k];
    for (i, patient) in positives.into_iter().enumerate() {
        folds[i % k].push(patient);
    }
    for (i, patient) in negatives.into_iter().enumerate() {
        folds[i % k].push(patient);
    }
    Ok(SplitPlan {
        target: target.to_string(),
        seed,
        folds,
    })
}

/// Seeded, stratified, nested subsets of a labeled patient pool.
///
/// Both class lists are shuffled once; the subset of size `s` takes the
/// first `round(s * pos_fraction)` shuffled positives and fills the rest
/// with shuffled negatives. Because every subset is a prefix of the same
/// shuffle, subsets of increasing size are nested for a fixed seed.
pub fn stratified_prefix_subsets(
    mut positives: Vec<String>,
    mut negatives: Vec<String>,
    sizes: &[usize],
    seed: u64,
) -> Result<Vec<HashSet<String>>, TrainError> {
    let pool = positives.len() + negatives.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    seeded_shuffle(&mut positives, &mut rng);
    seeded_shuffle(&mut negatives, &mut rng);
    let pos_fraction = positives.len() as f64 / pool.max(1) as f64;

    let mut subsets = Vec::with_capacity(sizes.len());
    for &size in sizes {
        if size == 0 || size > pool {
            return Err(TrainError::Range {
                size,
                available: pool,
            });
        }
        let mut take_pos = (size as f64 * pos_fraction).round() as usize;
        take_pos = take_pos.min(positives.len());
        let mut take_neg = size - take_pos;
        if take_neg > negatives.len() {
            take_pos += take_neg - negatives.len();
            take_neg = negatives.len();
        }
        let mut subset: HashSet<String> =
            positives.iter().take(take_pos).cloned().collect();
        subset.extend(negatives.iter().take(take_neg).cloned());
        subsets.push(subset);
    }
    Ok(subsets)
}

/// Restricts `manifest` to seeded stratified patient subsets, one per
/// requested size. Only patients with a non-NA consensus label for
/// `target` are eligible.
pub fn subsample_patients(
    manifest: &DatasetManifest,
    target: &str,
    sizes: &[usize],
    seed: u64,
) -> Result<Vec<DatasetManifest>, TrainError> {
    let (positives, negatives) = patients_by_class(manifest, target)?;
    let subsets = stratified_prefix_subsets(positives, negatives, sizes, seed)?;
    Ok(subsets
        .into_iter()
        .map(|patients| manifest.subset(&patients))
        .collect())
}
