//! Attention-based explanations: rollout, per-head class-token maps,
//! per-patch classification scores, and heatmap rendering.
//!
//! Rollout follows the recursive-product recipe: heads are averaged per
//! layer, the residual path is mixed in as `0.5·Â + 0.5·I`, rows are
//! renormalized, and the per-layer matrices are multiplied last-to-first.
//! The class token's row of that product, restricted to patch columns,
//! says how much each patch fed the prediction. Everything here reads
//! captured [`AttentionTrace`]s or runs plain forward passes; nothing
//! touches gradients.

use image::{Rgb, RgbImage};
use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::imaging::GridManifest;
use crate::model::{sigmoid, AttentionTrace, ModelError, PredictorModel, Trainable};
use crate::numeric::Real;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("attention explanations require a class-token model")]
    UnsupportedAggregation,
    #[error("target {target} out of range, model explains {targets} targets")]
    TargetOutOfRange { target: usize, targets: usize },
    #[error("layer {layer} out of range, trace has {layers} layers")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("trace captured no layers")]
    EmptyTrace,
    #[error("expected {expected} scores for the kept tiles, got {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Per-patch rollout attribution for one class token.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// Class-token row of the rollout product over the patch columns.
    pub scores: Vec<f64>,
    /// Set when essentially no mass reaches the patches (the class token
    /// only ever attended itself), in which case `scores` carries no
    /// signal.
    pub degenerate: bool,
}

/// Head-averaged attention with the residual path mixed in, rows
/// renormalized so the matrix stays stochastic.
fn mixed_layer<F: Real>(heads: &[Array2<F>]) -> Array2<f64> {
    let m = heads[0].nrows();
    let mut avg = Array2::<f64>::zeros((m, m));
    for head in heads {
        for (dst, src) in avg.iter_mut().zip(head.iter()) {
            *dst += src.to_f64().unwrap();
        }
    }
    let inv_h = 1.0 / heads.len() as f64;
    for ((i, j), v) in avg.indexed_iter_mut() {
        *v = 0.5 * *v * inv_h + if i == j { 0.5 } else { 0.0 };
    }
    for mut row in avg.rows_mut() {
        let sum: f64 = row.sum();
        if sum > 0.0 {
            row.mapv_inplace(|v| v / sum);
        }
    }
    avg
}

fn check_trace<F: Real>(trace: &AttentionTrace<F>, target: usize) -> Result<(), ExplainError> {
    if trace.num_class_tokens == 0 {
        return Err(ExplainError::UnsupportedAggregation);
    }
    if target >= trace.num_class_tokens {
        return Err(ExplainError::TargetOutOfRange {
            target,
            targets: trace.num_class_tokens,
        });
    }
    if trace.layers.is_empty() {
        return Err(ExplainError::EmptyTrace);
    }
    Ok(())
}

/// Multiplies the mixed per-layer matrices (last layer leftmost) and
/// returns `target`'s class-token row over the patch columns.
pub fn attention_rollout<F: Real>(
    trace: &AttentionTrace<F>,
    target: usize,
) -> Result<Rollout, ExplainError> {
    check_trace(trace, target)?;
    let mut rollout = mixed_layer(&trace.layers[0]);
    for layer in &trace.layers[1..] {
        rollout = mixed_layer(layer).dot(&rollout);
    }
    let t = trace.num_class_tokens;
    let scores: Vec<f64> = rollout.row(target).iter().skip(t).copied().collect();
    let patch_mass: f64 = scores.iter().sum();
    Ok(Rollout {
        scores,
        degenerate: patch_mass < 1e-9,
    })
}

/// The class token's post-softmax attention over the patches, one map per
/// head of `layer` (default: the last layer). Each map is non-negative
/// and sums to at most one; the missing mass is what the class token
/// spent on itself and its siblings.
pub fn per_head_class_attention<F: Real>(
    trace: &AttentionTrace<F>,
    target: usize,
    layer: Option<usize>,
) -> Result<Vec<Vec<f64>>, ExplainError> {
    check_trace(trace, target)?;
    let idx = layer.unwrap_or(trace.layers.len() - 1);
    if idx >= trace.layers.len() {
        return Err(ExplainError::LayerOutOfRange {
            layer: idx,
            layers: trace.layers.len(),
        });
    }
    let t = trace.num_class_tokens;
    Ok(trace.layers[idx]
        .iter()
        .map(|head| head.row(target).iter().skip(t).map(|v| v.to_f64().unwrap()).collect())
        .collect())
}

/// Classification probability of every patch on its own: each row is fed
/// through the model as a singleton bag and the target logit is squashed
/// through a sigmoid. Scores land in [0,1] with 0.5 as the natural
/// decision point, so they render without further normalization.
pub fn per_patch_class_scores<F: Real>(
    model: &PredictorModel<F>,
    bag: &Array2<F>,
    target: usize,
) -> Result<Vec<f64>, ExplainError> {
    if target >= model.num_targets() {
        return Err(ExplainError::TargetOutOfRange {
            target,
            targets: model.num_targets(),
        });
    }
    let mut scores = Vec::with_capacity(bag.nrows());
    for row in bag.rows() {
        let singleton = row.insert_axis(ndarray::Axis(0)).to_owned();
        let logits: Array1<F> = model.logits(&singleton)?;
        scores.push(sigmoid(logits[target]).to_f64().unwrap());
    }
    Ok(scores)
}

/// Quantile with linear interpolation between order statistics, on an
/// ascending-sorted slice.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Clamps to the 5th and 95th percentiles, then maps that span linearly
/// onto [0,1]. A constant input has no span and renders mid-scale (all
/// 0.5). Empty input stays empty.
pub fn quantile_clamp_normalize(scores: &[f64]) -> Vec<f64> {
    if scores.is_empty() {
        return Vec::new();
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q05 = quantile_sorted(&sorted, 0.05);
    let q95 = quantile_sorted(&sorted, 0.95);
    let span = q95 - q05;
    scores
        .iter()
        .map(|&s| {
            if span == 0.0 {
                0.5
            } else {
                (s.clamp(q05, q95) - q05) / span
            }
        })
        .collect()
}

/// Color semantics of a heatmap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapMode {
    /// Sequential blue→red for attention-style scores in [0,1].
    Attention,
    /// Diverging blue→white→red, white pinned at the 0.5 decision point.
    ClassScore,
}

fn lerp(a: [u8; 3], b: [u8; 3], t: f64) -> Rgb<u8> {
    let mix = |x: u8, y: u8| (f64::from(x) + (f64::from(y) - f64::from(x)) * t).round() as u8;
    Rgb([mix(a[0], b[0]), mix(a[1], b[1]), mix(a[2], b[2])])
}

const BLUE: [u8; 3] = [0, 0, 255];
const RED: [u8; 3] = [255, 0, 0];
const WHITE: [u8; 3] = [255, 255, 255];
const BACKGROUND: Rgb<u8> = Rgb([200, 200, 200]);

fn colorize(score: f64, mode: HeatmapMode) -> Rgb<u8> {
    let s = score.clamp(0.0, 1.0);
    match mode {
        HeatmapMode::Attention => lerp(BLUE, RED, s),
        HeatmapMode::ClassScore => {
            if s <= 0.5 {
                lerp(BLUE, WHITE, s * 2.0)
            } else {
                lerp(WHITE, RED, (s - 0.5) * 2.0)
            }
        }
    }
}

/// Paints one solid `cell_px`-square per kept tile at its grid position
/// over a gray canvas. `scores` must be ordered like `manifest.kept` and
/// already lie in [0,1].
pub fn render_heatmap(
    manifest: &GridManifest,
    scores: &[f64],
    mode: HeatmapMode,
    cell_px: u32,
) -> Result<RgbImage, ExplainError> {
    if scores.len() != manifest.kept.len() {
        return Err(ExplainError::LengthMismatch {
            expected: manifest.kept.len(),
            found: scores.len(),
        });
    }
    let cell = cell_px.max(1);
    let mut img = RgbImage::from_pixel(
        manifest.grid_cols.max(1) * cell,
        manifest.grid_rows.max(1) * cell,
        BACKGROUND,
    );
    for (&[gx, gy], &score) in manifest.kept.iter().zip(scores) {
        let color = colorize(score, mode);
        for dy in 0..cell {
            for dx in 0..cell {
                let x = gx * cell + dx;
                let y = gy * cell + dy;
                if x < img.width() && y < img.height() {
                    img.put_pixel(x, y, color);
                }
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::FilterParams;
    use crate::model::{Aggregation, ArchConfig, ModelConfig, TransformerModel};
    use ndarray::s;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn row_stochastic(m: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let mut a = Array2::from_shape_simple_fn((m, m), || rng.random_range(0.01..1.0));
        for mut row in a.rows_mut() {
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        a
    }

    fn random_trace(
        t: usize,
        n: usize,
        layers: usize,
        heads: usize,
        seed: u64,
    ) -> AttentionTrace<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AttentionTrace {
            num_class_tokens: t,
            num_patches: n,
            layers: (0..layers)
                .map(|_| (0..heads).map(|_| row_stochastic(t + n, &mut rng)).collect())
                .collect(),
        }
    }

    #[test]
    fn identity_attention_is_degenerate() {
        let eye = Array2::<f64>::eye(4);
        let trace = AttentionTrace {
            num_class_tokens: 1,
            num_patches: 3,
            layers: vec![vec![eye.clone(), eye.clone()], vec![eye.clone(), eye]],
        };
        let out = attention_rollout(&trace, 0).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.scores, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn single_layer_hand_oracle() {
        // One class token, two patches, one head. Mixing the residual into
        // the class row [0.2, 0.5, 0.3] gives [0.6, 0.25, 0.15], already
        // normalized, so the patch scores are exactly [0.25, 0.15].
        let a = ndarray::arr2(&[[0.2, 0.5, 0.3], [0.1, 0.6, 0.3], [0.25, 0.25, 0.5]]);
        let trace = AttentionTrace {
            num_class_tokens: 1,
            num_patches: 2,
            layers: vec![vec![a]],
        };
        let out = attention_rollout(&trace, 0).unwrap();
        assert!(!out.degenerate);
        assert!((out.scores[0] - 0.25).abs() < 1e-12);
        assert!((out.scores[1] - 0.15).abs() < 1e-12);
    }

    #[test]
    fn two_layer_product_matches_loop_oracle() {
        let trace = random_trace(2, 3, 2, 4, 9);
        let m = 5;
        let a1 = mixed_layer(&trace.layers[0]);
        let a2 = mixed_layer(&trace.layers[1]);
        // Recursive rollout: R = A2 * A1, multiplied by hand.
        let mut r = Array2::<f64>::zeros((m, m));
        for i in 0..m {
            for j in 0..m {
                for k in 0..m {
                    r[[i, j]] += a2[[i, k]] * a1[[k, j]];
                }
            }
        }
        for target in 0..2 {
            let out = attention_rollout(&trace, target).unwrap();
            for p in 0..3 {
                assert!((out.scores[p] - r[[target, 2 + p]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mixed_matrices_and_product_stay_row_stochastic() {
        for seed in 0..5 {
            let trace = random_trace(1, 6, 3, 8, seed);
            let mut product = Array2::<f64>::eye(7);
            for layer in &trace.layers {
                let mixed = mixed_layer(layer);
                for row in mixed.rows() {
                    assert!((row.sum() - 1.0).abs() < 1e-6);
                }
                product = mixed.dot(&product);
            }
            for row in product.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
            }
            // The full class row (self + patches) therefore sums to 1;
            // the returned patch slice carries the rest of the mass.
            let out = attention_rollout(&trace, 0).unwrap();
            let patch_mass: f64 = out.scores.iter().sum();
            assert!((patch_mass + product[[0, 0]] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rollout_is_equivariant_under_patch_permutation() {
        let t = 1;
        let n = 5;
        let trace = random_trace(t, n, 2, 3, 42);
        // Swap patches 0 and 3 in every head (both rows and columns).
        let perm = [3usize, 1, 2, 0, 4];
        let permuted = AttentionTrace {
            num_class_tokens: t,
            num_patches: n,
            layers: trace
                .layers
                .iter()
                .map(|heads| {
                    heads
                        .iter()
                        .map(|a| {
                            let m = t + n;
                            let map = |i: usize| if i < t { i } else { t + perm[i - t] };
                            Array2::from_shape_fn((m, m), |(i, j)| a[[map(i), map(j)]])
                        })
                        .collect()
                })
                .collect(),
        };
        let base = attention_rollout(&trace, 0).unwrap();
        let moved = attention_rollout(&permuted, 0).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert!((moved.scores[i] - base.scores[p]).abs() < 1e-12);
        }
        let heads_base = per_head_class_attention(&trace, 0, None).unwrap();
        let heads_moved = per_head_class_attention(&permuted, 0, None).unwrap();
        for (hb, hm) in heads_base.iter().zip(&heads_moved) {
            for (i, &p) in perm.iter().enumerate() {
                assert!((hm[i] - hb[p]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn global_average_trace_is_unsupported() {
        let trace = random_trace(0, 4, 2, 2, 0);
        assert!(matches!(
            attention_rollout(&trace, 0),
            Err(ExplainError::UnsupportedAggregation)
        ));
        assert!(matches!(
            per_head_class_attention(&trace, 0, None),
            Err(ExplainError::UnsupportedAggregation)
        ));
    }

    #[test]
    fn bad_target_and_layer_indices_are_rejected() {
        let trace = random_trace(2, 4, 2, 2, 0);
        assert!(matches!(
            attention_rollout(&trace, 2),
            Err(ExplainError::TargetOutOfRange { target: 2, targets: 2 })
        ));
        assert!(matches!(
            per_head_class_attention(&trace, 0, Some(2)),
            Err(ExplainError::LayerOutOfRange { layer: 2, layers: 2 })
        ));
        let empty = AttentionTrace::<f64> {
            num_class_tokens: 1,
            num_patches: 3,
            layers: vec![],
        };
        assert!(matches!(
            attention_rollout(&empty, 0),
            Err(ExplainError::EmptyTrace)
        ));
    }

    #[test]
    fn per_head_maps_have_h_maps_of_n_nonnegative_scores_summing_below_one() {
        let trace = random_trace(1, 6, 2, 8, 3);
        let maps = per_head_class_attention(&trace, 0, None).unwrap();
        assert_eq!(maps.len(), 8);
        for map in &maps {
            assert_eq!(map.len(), 6);
            let sum: f64 = map.iter().sum();
            assert!(map.iter().all(|&v| v >= 0.0));
            assert!(sum <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn per_head_maps_match_recomputation_from_q_and_k() {
        // One-layer model: the layer input is exactly the initial token
        // stack, so the captured attention can be recomputed from the
        // parameters alone.
        let cfg = ModelConfig {
            input_dim: 6,
            latent_dim: 8,
            layers: 1,
            heads: 2,
            head_dim: 4,
            mlp_hidden: 16,
            num_targets: 1,
            aggregation: Aggregation::ClassToken,
            dropout: 0.0,
            head_layernorm: false,
        };
        let model = TransformerModel::<f64>::init(cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bag = Array2::from_shape_simple_fn((4, 6), || rng.random_range(-1.0..1.0));
        let (_, trace) = model.forward_traced(&bag).unwrap();
        let maps = per_head_class_attention(&trace, 0, None).unwrap();

        // Rebuild the layer input: class token stacked on relu(proj).
        let p = &model.params;
        let mut x = bag.dot(&p.proj_w);
        for mut row in x.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v + p.proj_b[j]).max(0.0);
            }
        }
        let mut tokens = Array2::<f64>::zeros((5, 8));
        tokens.slice_mut(s![..1, ..]).assign(&p.class_tokens);
        tokens.slice_mut(s![1.., ..]).assign(&x);
        let layer = &p.layers[0];
        let mut u = Array2::<f64>::zeros((5, 8));
        for (i, row) in tokens.rows().into_iter().enumerate() {
            let mean = row.sum() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            let inv = 1.0 / (var + 1e-12).sqrt();
            for j in 0..8 {
                u[[i, j]] = (row[j] - mean) * inv * layer.ln1_scale[j] + layer.ln1_shift[j];
            }
        }
        let q = u.dot(&layer.w_q);
        let k = u.dot(&layer.w_k);
        for (h, map) in maps.iter().enumerate() {
            let qh = q.slice(s![.., h * 4..(h + 1) * 4]);
            let kh = k.slice(s![.., h * 4..(h + 1) * 4]);
            let mut row: Vec<f64> = (0..5)
                .map(|j| qh.row(0).dot(&kh.row(j)) / 2.0)
                .collect();
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in &mut row {
                *v = (*v - max).exp();
                sum += *v;
            }
            for (patch, &m) in map.iter().enumerate() {
                let expected = row[1 + patch] / sum;
                assert!(
                    (m - expected).abs() < 1e-10,
                    "head {h} patch {patch}: {m} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn per_patch_scores_are_probabilities_and_per_row_deterministic() {
        let arch = ArchConfig::Transformer(ModelConfig::tiny());
        let model: PredictorModel<f64> = PredictorModel::init(&arch, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut bag = Array2::from_shape_simple_fn((6, 8), || rng.random_range(-1.0..1.0));
        // Duplicate one row; its score must repeat exactly.
        let dup = bag.row(1).to_owned();
        bag.row_mut(4).assign(&dup);
        let scores = per_patch_class_scores(&model, &bag, 0).unwrap();
        assert_eq!(scores.len(), 6);
        assert!(scores.iter().all(|&s| (0.0..=1.0).contains(&s)));
        assert_eq!(scores[1], scores[4]);
        // Independence from bag mates: scoring a sub-bag changes nothing.
        let solo = per_patch_class_scores(&model, &bag.slice(s![..2, ..]).to_owned(), 0).unwrap();
        assert_eq!(scores[0], solo[0]);
        assert_eq!(scores[1], solo[1]);
    }

    #[test]
    fn per_patch_target_bounds_are_checked() {
        let arch = ArchConfig::Transformer(ModelConfig::tiny());
        let model: PredictorModel<f64> = PredictorModel::init(&arch, 1).unwrap();
        let bag = Array2::<f64>::zeros((2, 8));
        assert!(matches!(
            per_patch_class_scores(&model, &bag, 5),
            Err(ExplainError::TargetOutOfRange { .. })
        ));
    }

    #[test]
    fn quantile_normalize_uniform_grid() {
        let scores: Vec<f64> = (0..100).map(|i| i as f64 / 99.0).collect();
        let out = quantile_clamp_normalize(&scores);
        // q05 = 0.05, q95 = 0.95 by linear interpolation; values below and
        // above saturate, the interior maps affinely.
        assert_eq!(out[0], 0.0);
        assert_eq!(out[4], 0.0);
        assert_eq!(out[95], 1.0);
        assert_eq!(out[99], 1.0);
        let mid = (scores[50] - 0.05) / 0.9;
        assert!((out[50] - mid).abs() < 1e-12);
        assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn quantile_normalize_constant_input_is_all_half() {
        let out = quantile_clamp_normalize(&[3.7; 9]);
        assert_eq!(out, vec![0.5; 9]);
        assert!(quantile_clamp_normalize(&[]).is_empty());
        assert_eq!(quantile_clamp_normalize(&[1.0]), vec![0.5]);
    }

    #[test]
    fn quantile_normalize_stays_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let scores: Vec<f64> =
                (0..37).map(|_| rng.random_range(-50.0..50.0)).collect();
            let out = quantile_clamp_normalize(&scores);
            assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    fn grid_2x2() -> GridManifest {
        GridManifest {
            slide_id: "s".to_string(),
            source_mpp: 0.25,
            target_mpp: 0.5,
            tile_px: 224,
            grid_cols: 2,
            grid_rows: 2,
            kept: vec![[0, 0], [1, 0], [0, 1], [1, 1]],
            rejected: 0,
            filter: FilterParams::default(),
        }
    }

    #[test]
    fn heatmap_extremes_are_pure_blue_and_pure_red() {
        let grid = grid_2x2();
        for mode in [HeatmapMode::Attention, HeatmapMode::ClassScore] {
            let blue = render_heatmap(&grid, &[0.0; 4], mode, 3).unwrap();
            let red = render_heatmap(&grid, &[1.0; 4], mode, 3).unwrap();
            assert!(blue.pixels().all(|p| *p == Rgb([0, 0, 255])));
            assert!(red.pixels().all(|p| *p == Rgb([255, 0, 0])));
        }
    }

    #[test]
    fn heatmap_checkerboard_lands_on_exact_cells() {
        let grid = grid_2x2();
        let img =
            render_heatmap(&grid, &[0.0, 1.0, 1.0, 0.0], HeatmapMode::Attention, 4).unwrap();
        assert_eq!(img.dimensions(), (8, 8));
        assert_eq!(*img.get_pixel(0, 0), Rgb([0, 0, 255]));
        assert_eq!(*img.get_pixel(3, 3), Rgb([0, 0, 255]));
        assert_eq!(*img.get_pixel(4, 0), Rgb([255, 0, 0]));
        assert_eq!(*img.get_pixel(0, 4), Rgb([255, 0, 0]));
        assert_eq!(*img.get_pixel(7, 7), Rgb([0, 0, 255]));
    }

    #[test]
    fn heatmap_leaves_dropped_tiles_gray() {
        let mut grid = grid_2x2();
        grid.kept = vec![[0, 0]];
        grid.rejected = 3;
        let img = render_heatmap(&grid, &[1.0], HeatmapMode::Attention, 2).unwrap();
        assert_eq!(*img.get_pixel(0, 0), Rgb([255, 0, 0]));
        assert_eq!(*img.get_pixel(2, 0), Rgb([200, 200, 200]));
        assert_eq!(*img.get_pixel(0, 2), Rgb([200, 200, 200]));
        assert_eq!(*img.get_pixel(3, 3), Rgb([200, 200, 200]));
    }

    #[test]
    fn heatmap_class_score_mode_is_white_at_half() {
        let grid = grid_2x2();
        let img =
            render_heatmap(&grid, &[0.5; 4], HeatmapMode::ClassScore, 1).unwrap();
        assert!(img.pixels().all(|p| *p == Rgb([255, 255, 255])));
        // Attention mode at 0.5 is purple, not white.
        let att = render_heatmap(&grid, &[0.5; 4], HeatmapMode::Attention, 1).unwrap();
        assert_eq!(*att.get_pixel(0, 0), Rgb([128, 0, 128]));
    }

    #[test]
    fn heatmap_score_count_must_match_kept_tiles() {
        let grid = grid_2x2();
        assert!(matches!(
            render_heatmap(&grid, &[0.3; 3], HeatmapMode::Attention, 2),
            Err(ExplainError::LengthMismatch { expected: 4, found: 3 })
        ));
    }

    #[test]
    fn rollout_from_a_real_forward_is_normalized_and_nonneg() {
        let arch = ArchConfig::Transformer(ModelConfig::tiny());
        let model: PredictorModel<f64> = PredictorModel::init(&arch, 6).unwrap();
        let PredictorModel::Transformer(inner) = &model else {
            panic!("expected transformer");
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bag = Array2::from_shape_simple_fn((7, 8), || rng.random_range(-1.0..1.0));
        let (_, trace) = inner.forward_traced(&bag).unwrap();
        let out = attention_rollout(&trace, 0).unwrap();
        assert_eq!(out.scores.len(), 7);
        assert!(!out.degenerate);
        assert!(out.scores.iter().all(|&s| s >= 0.0));
        let mass: f64 = out.scores.iter().sum();
        assert!(mass > 0.0 && mass <= 1.0 + 1e-9);
    }
}
