//! Ranking metrics and threshold selection for binary classifiers.
//!
//! Everything operates on a [`ScoredSet`]: per-sample scores (higher means
//! more positive) paired with 0/1 labels. The decision rule at a threshold
//! `t` is inclusive: predict positive iff `score >= t`. AUROC uses the
//! Mann-Whitney formulation with half credit for score ties; AUPRC is the
//! average-precision form with tie groups collapsed to a single threshold
//! step. Rates with a zero denominator are reported as `None`, never as 0.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("score at index {index} is not finite")]
    NonFiniteScore { index: usize },
    #[error("label at index {index} is {value}, expected 0 or 1")]
    InvalidLabel { index: usize, value: u8 },
    #[error("{metric} is undefined: {reason}")]
    Undefined {
        metric: &'static str,
        reason: &'static str,
    },
}

/// Scores with ground-truth binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self, MetricError> {
        if scores.len() != labels.len() {
            return Err(MetricError::LengthMismatch {
                scores: scores.len(),
                labels: labels.len(),
            });
        }
        if let Some(index) = scores.iter().position(|s| !s.is_finite()) {
            return Err(MetricError::NonFiniteScore { index });
        }
        if let Some(index) = labels.iter().position(|&l| l > 1) {
            return Err(MetricError::InvalidLabel {
                index,
                value: labels[index],
            });
        }
        Ok(Self { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    /// Indices sorted by score ascending. Ties keep their original order,
    /// though no metric here depends on it.
    fn ascending_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.scores[a].partial_cmp(&self.scores[b]).unwrap());
        order
    }

    /// Distinct score values, descending.
    fn distinct_thresholds(&self) -> Vec<f64> {
        let mut s = self.scores.clone();
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        s.dedup();
        s
    }

    fn require_both_classes(&self, metric: &'static str) -> Result<(), MetricError> {
        if self.positives() == 0 {
            return Err(MetricError::Undefined {
                metric,
                reason: "no positive samples",
            });
        }
        if self.negatives() == 0 {
            return Err(MetricError::Undefined {
                metric,
                reason: "no negative samples",
            });
        }
        Ok(())
    }
}

/// Area under the ROC curve via the Mann-Whitney statistic:
/// `(#(pos > neg) + 0.5 * #(pos == neg)) / (P * N)` over all
/// positive/negative pairs.
pub fn auroc(set: &ScoredSet) -> Result<f64, MetricError> {
    set.require_both_classes("auroc")?;
    let order = set.ascending_order();
    let mut wins = 0u64;
    let mut tie_pairs = 0u64;
    let mut negatives_below = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && set.scores[order[j]] == set.scores[order[i]] {
            j += 1;
        }
        let group = &order[i..j];
        let pos = group.iter().filter(|&&k| set.labels[k] == 1).count() as u64;
        let neg = group.len() as u64 - pos;
        wins += pos * negatives_below;
        tie_pairs += pos * neg;
        negatives_below += neg;
        i = j;
    }
    let pairs = (set.positives() as u64 * set.negatives() as u64) as f64;
    Ok((wins as f64 + 0.5 * tie_pairs as f64) / pairs)
}

/// Area under the precision-recall curve in average-precision form:
/// one recall step per distinct threshold, weighted by the precision after
/// including that threshold's whole tie group.
pub fn auprc(set: &ScoredSet) -> Result<f64, MetricError> {
    let positives = set.positives();
    if positives == 0 {
        return Err(MetricError::Undefined {
            metric: "auprc",
            reason: "no positive samples",
        });
    }
    let order = set.ascending_order();
    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut seen = 0usize;
    // Walk descending through tie groups.
    let mut i = order.len();
    while i > 0 {
        let mut j = i;
        while j > 0 && set.scores[order[j - 1]] == set.scores[order[i - 1]] {
            j -= 1;
        }
        let group = &order[j..i];
        let group_tp = group.iter().filter(|&&k| set.labels[k] == 1).count();
        tp += group_tp;
        seen += group.len();
        let precision = tp as f64 / seen as f64;
        ap += (group_tp as f64 / positives as f64) * precision;
        i = j;
    }
    Ok(ap)
}

/// Confusion matrix and derived rates at a threshold (positive iff
/// `score >= threshold`). Rates with zero denominators are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub npv: Option<f64>,
    pub f1: Option<f64>,
}

pub fn confusion(set: &ScoredSet, threshold: f64) -> Confusion {
    let mut tp = 0;
    let mut fp = 0;
    let mut tn = 0;
    let mut fn_ = 0;
    for (&s, &l) in set.scores.iter().zip(&set.labels) {
        match (s >= threshold, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let rate = |num: usize, den: usize| {
        if den == 0 {
            None
        } else {
            Some(num as f64 / den as f64)
        }
    };
    Confusion {
        threshold,
        tp,
        fp,
        tn,
        fn_,
        sensitivity: rate(tp, tp + fn_),
        specificity: rate(tn, tn + fp),
        precision: rate(tp, tp + fp),
        npv: rate(tn, tn + fn_),
        f1: rate(2 * tp, 2 * tp + fp + fn_),
    }
}

/// Largest threshold whose sensitivity is at least `target`, i.e. the one
/// that maximizes specificity subject to the sensitivity constraint. With
/// `P` positives this is the `ceil(target * P)`-th largest positive score.
pub fn threshold_for_sensitivity(set: &ScoredSet, target: f64) -> Result<f64, MetricError> {
    let mut pos_scores: Vec<f64> = set
        .scores
        .iter()
        .zip(&set.labels)
        .filter(|(_, &l)| l == 1)
        .map(|(&s, _)| s)
        .collect();
    if pos_scores.is_empty() {
        return Err(MetricError::Undefined {
            metric: "threshold_for_sensitivity",
            reason: "no positive samples",
        });
    }
    pos_scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let needed = ((target * pos_scores.len() as f64).ceil() as usize).clamp(1, pos_scores.len());
    Ok(pos_scores[needed - 1])
}

/// Threshold among the distinct scores maximizing the geometric mean
/// `sqrt(sensitivity * specificity)`; ties resolve to the higher threshold.
pub fn gmean_threshold(set: &ScoredSet) -> Result<f64, MetricError> {
    set.require_both_classes("gmean_threshold")?;
    let mut best: Option<(f64, f64)> = None;
    // distinct_thresholds is descending, so strict improvement keeps the
    // highest-threshold argmax.
    for t in set.distinct_thresholds() {
        let c = confusion(set, t);
        let g = (c.sensitivity.unwrap() * c.specificity.unwrap()).sqrt();
        match best {
            Some((best_g, _)) if g <= best_g => {}
            _ => best = Some((g, t)),
        }
    }
    Ok(best.unwrap().1)
}

/// ROC curve vertices as (FPR, TPR), one per distinct threshold descending,
/// anchored at (0, 0). The final vertex is always (1, 1).
pub fn roc_points(set: &ScoredSet) -> Result<Vec<(f64, f64)>, MetricError> {
    set.require_both_classes("roc_points")?;
    let p = set.positives() as f64;
    let n = set.negatives() as f64;
    let order = set.ascending_order();
    let mut points = vec![(0.0, 0.0)];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = order.len();
    while i > 0 {
        let mut j = i;
        while j > 0 && set.scores[order[j - 1]] == set.scores[order[i - 1]] {
            j -= 1;
        }
        for &k in &order[j..i] {
            if set.labels[k] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        points.push((fp as f64 / n, tp as f64 / p));
        i = j;
    }
    Ok(points)
}

/// Precision-recall curve vertices as (recall, precision), one per distinct
/// threshold descending.
pub fn pr_points(set: &ScoredSet) -> Result<Vec<(f64, f64)>, MetricError> {
    set.require_both_classes("pr_points")?;
    let p = set.positives() as f64;
    let order = set.ascending_order();
    let mut points = Vec::new();
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut i = order.len();
    while i > 0 {
        let mut j = i;
        while j > 0 && set.scores[order[j - 1]] == set.scores[order[i - 1]] {
            j -= 1;
        }
        for &k in &order[j..i] {
            if set.labels[k] == 1 {
                tp += 1;
            }
        }
        seen += i - j;
        points.push((tp as f64 / p, tp as f64 / seen as f64));
        i = j;
    }
    Ok(points)
}

/// Trapezoidal integration of a polyline given as (x, y) vertices.
pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) * 0.5)
        .sum()
}

/// Quantile with linear interpolation between order statistics
/// (`q` in [0, 1]). Returns NaN on empty input.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Mean and population standard deviation, as used for fold summaries.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
    (mean, var.sqrt())
}

#[cfg(test)]
pub mod oracle {
    //! Brute-force reference implementations, deliberately written as
    //! different algorithms from the production code above.

    use super::ScoredSet;

    /// AUROC by enumerating every positive/negative pair.
    pub fn auroc_pair_counting(set: &ScoredSet) -> f64 {
        let mut credit = 0.0;
        let mut pairs = 0u64;
        for (i, &li) in set.labels().iter().enumerate() {
            if li != 1 {
                continue;
            }
            for (j, &lj) in set.labels().iter().enumerate() {
                if lj != 0 {
                    continue;
                }
                pairs += 1;
                let (ps, ns) = (set.scores()[i], set.scores()[j]);
                if ps > ns {
                    credit += 1.0;
                } else if ps == ns {
                    credit += 0.5;
                }
            }
        }
        credit / pairs as f64
    }

    /// AUPRC by enumerating every distinct threshold and integrating the
    /// recall steps, recomputing the confusion matrix from scratch at each.
    pub fn auprc_threshold_enumeration(set: &ScoredSet) -> f64 {
        let mut thresholds: Vec<f64> = set.scores().to_vec();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for t in thresholds {
            let c = super::confusion(set, t);
            let recall = c.sensitivity.unwrap();
            ap += (recall - prev_recall) * c.precision.unwrap();
            prev_recall = recall;
        }
        ap
    }

    /// Exhaustive scan for the sensitivity-constrained threshold.
    pub fn threshold_for_sensitivity_scan(set: &ScoredSet, target: f64) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for &t in set.scores() {
            let c = super::confusion(set, t);
            if c.sensitivity.unwrap() >= target && t > best {
                best = t;
            }
        }
        best
    }

    /// Exhaustive scan for the G-mean-optimal threshold.
    pub fn gmean_scan(set: &ScoredSet) -> f64 {
        let mut best_g = f64::NEG_INFINITY;
        let mut best_t = f64::NEG_INFINITY;
        for &t in set.scores() {
            let c = super::confusion(set, t);
            let g = (c.sensitivity.unwrap() * c.specificity.unwrap()).sqrt();
            if g > best_g || (g == best_g && t > best_t) {
                best_g = g;
                best_t = t;
            }
        }
        best_t
    }

    /// Random set with ties: scores drawn from a small lattice so exact
    /// float comparisons stay meaningful.
    pub fn random_set(rng: &mut impl rand::Rng, len: usize) -> ScoredSet {
        loop {
            let scores: Vec<f64> = (0..len)
                .map(|_| rng.random_range(-1920i32..1920) as f64 / 64.0)
                .collect();
            let labels: Vec<u8> = (0..len).map(|_| rng.random_range(0..2) as u8).collect();
            let set = ScoredSet::new(scores, labels).unwrap();
            if set.positives() > 0 && set.negatives() > 0 {
                return set;
            }
        }
    }
}
