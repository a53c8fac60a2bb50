//! Scaled dot-product attention and its multi-head wrapper.
//!
//! `self_attention` is the textbook primitive `softmax(QK^T/sqrt(d_k)) V`
//! with max-subtracted softmax rows. `msa` projects tokens once per role,
//! slices the projections into heads, runs the primitive per head and mixes
//! the concatenated head outputs through an output projection. There are no
//! bias terms on any of the four projections.

use ndarray::{s, Array1, Array2, ArrayView2};

use super::transformer::LayerParams;
use super::{ensure_finite, ModelError};
use crate::numeric::{c, Real};

/// Replaces each row of `z` with its softmax, subtracting the row max first.
pub(crate) fn softmax_rows_inplace<F: Real>(z: &mut Array2<F>) {
    for mut row in z.rows_mut() {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = F::one() / sum;
        row.mapv_inplace(|v| v * inv);
    }
}

/// Softmax over a vector, max-subtracted.
pub(crate) fn softmax_inplace<F: Real>(z: &mut Array1<F>) {
    let max = z.iter().cloned().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = F::one() / sum;
    z.mapv_inplace(|v| v * inv);
}

/// Reverse-mode softmax: given probabilities `p` and upstream `dp`, returns
/// the gradient w.r.t. the logits, `p .* (dp - <dp, p>)`, row by row.
pub(crate) fn softmax_backward_rows<F: Real>(probs: &Array2<F>, mut dprobs: Array2<F>) -> Array2<F> {
    for (p_row, mut d_row) in probs.rows().into_iter().zip(dprobs.rows_mut()) {
        let mut dot = F::zero();
        for (p, d) in p_row.iter().zip(d_row.iter()) {
            dot += *p * *d;
        }
        for (p, d) in p_row.iter().zip(d_row.iter_mut()) {
            *d = *p * (*d - dot);
        }
    }
    dprobs
}

/// Vector form of [`softmax_backward_rows`].
pub(crate) fn softmax_backward<F: Real>(probs: &Array1<F>, mut dprobs: Array1<F>) -> Array1<F> {
    let mut dot = F::zero();
    for (p, d) in probs.iter().zip(dprobs.iter()) {
        dot += *p * *d;
    }
    for (p, d) in probs.iter().zip(dprobs.iter_mut()) {
        *d = *p * (*d - dot);
    }
    dprobs
}

/// Core attention without validation; returns the output and the
/// post-softmax weight matrix.
fn sa_core<F: Real>(
    q: &ArrayView2<F>,
    k: &ArrayView2<F>,
    v: &ArrayView2<F>,
) -> (Array2<F>, Array2<F>) {
    let inv_sqrt_dk = F::one() / c::<F>(q.ncols() as f64).sqrt();
    let mut z = q.dot(&k.t());
    z.mapv_inplace(|x| x * inv_sqrt_dk);
    softmax_rows_inplace(&mut z);
    let out = z.dot(v);
    (out, z)
}

/// Scaled dot-product attention `softmax(QK^T / sqrt(d_k)) V`.
///
/// `q` and `k` must share both dimensions, and `v` must have the same number
/// of rows. Any NaN or infinity in the inputs is rejected with
/// [`ModelError::Numeric`]; for finite inputs the max-subtracted softmax
/// cannot overflow, so the output is always finite.
pub fn self_attention<F: Real>(
    q: ArrayView2<F>,
    k: ArrayView2<F>,
    v: ArrayView2<F>,
) -> Result<Array2<F>, ModelError> {
    if q.ncols() == 0 {
        return Err(ModelError::DimMismatch {
            context: "self_attention key width".into(),
            expected: 1,
            found: 0,
        });
    }
    if k.ncols() != q.ncols() {
        return Err(ModelError::DimMismatch {
            context: "self_attention K width".into(),
            expected: q.ncols(),
            found: k.ncols(),
        });
    }
    if k.nrows() != q.nrows() || v.nrows() != q.nrows() {
        return Err(ModelError::DimMismatch {
            context: "self_attention row counts".into(),
            expected: q.nrows(),
            found: k.nrows().max(v.nrows()),
        });
    }
    ensure_finite(&q, "self_attention Q")?;
    ensure_finite(&k, "self_attention K")?;
    ensure_finite(&v, "self_attention V")?;
    Ok(sa_core(&q, &k, &v).0)
}

/// Multi-head self-attention output, with per-head weights when captured.
#[derive(Debug, Clone)]
pub struct MsaOutput<F> {
    /// Mixed token states, same shape as the input.
    pub out: Array2<F>,
    /// Post-softmax attention matrices, one `n x n` matrix per head.
    pub attention: Option<Vec<Array2<F>>>,
}

/// Everything the backward pass needs from an MSA forward.
#[derive(Debug, Clone)]
pub(crate) struct MsaCache<F> {
    pub q: Array2<F>,
    pub k: Array2<F>,
    pub v: Array2<F>,
    /// Per-head post-softmax attention.
    pub attn: Vec<Array2<F>>,
    /// Concatenated head outputs, before the output projection.
    pub h_cat: Array2<F>,
}

pub(crate) fn msa_forward_cached<F: Real>(
    x: &Array2<F>,
    layer: &LayerParams<F>,
    heads: usize,
    head_dim: usize,
) -> Result<(Array2<F>, MsaCache<F>), ModelError> {
    let n = x.nrows();
    let latent = heads * head_dim;
    if x.ncols() != latent {
        return Err(ModelError::DimMismatch {
            context: "msa token width".into(),
            expected: latent,
            found: x.ncols(),
        });
    }
    ensure_finite(x, "msa input")?;

    let q = x.dot(&layer.w_q);
    let k = x.dot(&layer.w_k);
    let v = x.dot(&layer.w_v);
    let mut h_cat = Array2::<F>::zeros((n, latent));
    let mut attn = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * head_dim..(h + 1) * head_dim];
        let (head_out, weights) =
            sa_core(&q.slice(cols), &k.slice(cols), &v.slice(cols));
        h_cat.slice_mut(cols).assign(&head_out);
        attn.push(weights);
    }
    let out = h_cat.dot(&layer.w_o);
    ensure_finite(&out, "msa output")?;
    Ok((
        out,
        MsaCache {
            q,
            k,
            v,
            attn,
            h_cat,
        },
    ))
}

/// Multi-head self-attention over tokens `x`, optionally capturing the
/// post-softmax attention matrix of every head.
pub fn msa<F: Real>(
    x: &Array2<F>,
    layer: &LayerParams<F>,
    heads: usize,
    capture: bool,
) -> Result<MsaOutput<F>, ModelError> {
    if heads == 0 || layer.w_q.ncols() % heads != 0 {
        return Err(ModelError::InvalidConfig {
            reason: format!(
                "head count {heads} does not divide projection width {}",
                layer.w_q.ncols()
            ),
        });
    }
    let head_dim = layer.w_q.ncols() / heads;
    let (out, cache) = msa_forward_cached(x, layer, heads, head_dim)?;
    Ok(MsaOutput {
        out,
        attention: capture.then_some(cache.attn),
    })
}

/// Backward through one MSA, accumulating projection gradients into `grads`
/// and returning the gradient w.r.t. the input tokens.
pub(crate) fn msa_backward<F: Real>(
    dout: &Array2<F>,
    x: &Array2<F>,
    layer: &LayerParams<F>,
    cache: &MsaCache<F>,
    heads: usize,
    head_dim: usize,
    grads: &mut LayerParams<F>,
) -> Array2<F> {
    let n = x.nrows();
    let latent = heads * head_dim;
    let inv_sqrt_dk = F::one() / c::<F>(head_dim as f64).sqrt();

    grads.w_o += &cache.h_cat.t().dot(dout);
    let dh_cat = dout.dot(&layer.w_o.t());

    let mut dq = Array2::<F>::zeros((n, latent));
    let mut dk = Array2::<F>::zeros((n, latent));
    let mut dv = Array2::<F>::zeros((n, latent));
    for h in 0..heads {
        let cols = s![.., h * head_dim..(h + 1) * head_dim];
        let d_head = dh_cat.slice(cols);
        let attn = &cache.attn[h];
        let qs = cache.q.slice(cols);
        let ks = cache.k.slice(cols);
        let vs = cache.v.slice(cols);

        dv.slice_mut(cols).assign(&attn.t().dot(&d_head));
        let dattn = d_head.dot(&vs.t());
        let mut dz = softmax_backward_rows(attn, dattn);
        dz.mapv_inplace(|v| v * inv_sqrt_dk);
        dq.slice_mut(cols).assign(&dz.dot(&ks));
        dk.slice_mut(cols).assign(&dz.t().dot(&qs));
    }
    grads.w_q += &x.t().dot(&dq);
    grads.w_k += &x.t().dot(&dk);
    grads.w_v += &x.t().dot(&dv);
    dq.dot(&layer.w_q.t()) + dk.dot(&layer.w_k.t()) + dv.dot(&layer.w_v.t())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::model::transformer::TransformerParams;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    /// Straight-line evaluation of softmax(QK^T/sqrt(dk))V with explicit
    /// loops, used as the oracle for the vectorized path.
    fn brute_force_attention(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>) -> Array2<f64> {
        let n = q.nrows();
        let dk = q.ncols();
        let dv = v.ncols();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut out = Array2::zeros((n, dv));
        for i in 0..n {
            let mut logits = vec![0.0; n];
            for j in 0..n {
                let mut dot = 0.0;
                for e in 0..dk {
                    dot += q[[i, e]] * k[[j, e]];
                }
                logits[j] = dot * scale;
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = weights.iter().sum();
            for j in 0..n {
                let a = weights[j] / total;
                for e in 0..dv {
                    out[[i, e]] += a * v[[j, e]];
                }
            }
        }
        out
    }

    #[test]
    fn zero_queries_and_keys_give_uniform_attention() {
        let q = Array2::<f64>::zeros((3, 4));
        let k = Array2::<f64>::zeros((3, 4));
        let v = array![[1.0, 2.0], [3.0, 4.0], [5.0, 9.0]];
        let out = self_attention(q.view(), k.view(), v.view()).unwrap();
        let mean = [(1.0 + 3.0 + 5.0) / 3.0, (2.0 + 4.0 + 9.0) / 3.0];
        for i in 0..3 {
            for e in 0..2 {
                assert!((out[[i, e]] - mean[e]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_row_returns_v_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_matrix(&mut rng, 1, 6);
        let k = random_matrix(&mut rng, 1, 6);
        let v = random_matrix(&mut rng, 1, 3);
        let out = self_attention(q.view(), k.view(), v.view()).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn matches_brute_force_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let n = rng.random_range(1..8);
            let dk = rng.random_range(1..6);
            let dv = rng.random_range(1..6);
            let q = random_matrix(&mut rng, n, dk);
            let k = random_matrix(&mut rng, n, dk);
            let v = random_matrix(&mut rng, n, dv);
            let fast = self_attention(q.view(), k.view(), v.view()).unwrap();
            let slow = brute_force_attention(&q, &k, &v);
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() <= 1e-12, "fast {a} vs brute force {b}");
            }
        }
    }

    #[test]
    fn fixed_3x4_case_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = random_matrix(&mut rng, 3, 4);
        let k = random_matrix(&mut rng, 3, 4);
        let v = random_matrix(&mut rng, 3, 4);
        let fast = self_attention(q.view(), k.view(), v.view()).unwrap();
        let slow = brute_force_attention(&q, &k, &v);
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn non_finite_inputs_are_rejected() {
        let mut q = Array2::<f64>::zeros((2, 3));
        let k = Array2::<f64>::zeros((2, 3));
        let v = Array2::<f64>::zeros((2, 3));
        q[[1, 2]] = f64::NAN;
        assert!(matches!(
            self_attention(q.view(), k.view(), v.view()),
            Err(ModelError::Numeric { .. })
        ));
        let mut v_inf = v.clone();
        v_inf[[0, 0]] = f64::INFINITY;
        let q_ok = Array2::<f64>::zeros((2, 3));
        assert!(matches!(
            self_attention(q_ok.view(), k.view(), v_inf.view()),
            Err(ModelError::Numeric { .. })
        ));
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let q = Array2::<f64>::zeros((2, 3));
        let k = Array2::<f64>::zeros((2, 4));
        let v = Array2::<f64>::zeros((2, 3));
        assert!(matches!(
            self_attention(q.view(), k.view(), v.view()),
            Err(ModelError::DimMismatch { .. })
        ));
        let k_short = Array2::<f64>::zeros((1, 3));
        assert!(self_attention(q.view(), k_short.view(), v.view()).is_err());
    }

    fn layer_for_tests(latent: usize, seed: u64) -> LayerParams<f64> {
        let cfg = ModelConfig {
            input_dim: latent,
            latent_dim: latent,
            layers: 1,
            heads: 1,
            head_dim: latent,
            mlp_hidden: 4,
            num_targets: 1,
            ..ModelConfig::tiny()
        };
        TransformerParams::<f64>::init(&cfg, seed).layers.remove(0)
    }

    #[test]
    fn single_head_msa_is_attention_composed_with_output_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let latent = 6;
        let layer = layer_for_tests(latent, 5);
        let x = random_matrix(&mut rng, 7, latent);
        let got = msa(&x, &layer, 1, false).unwrap().out;
        let sa = self_attention(
            x.dot(&layer.w_q).view(),
            x.dot(&layer.w_k).view(),
            x.dot(&layer.w_v).view(),
        )
        .unwrap();
        let want = sa.dot(&layer.w_o);
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn msa_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = ModelConfig::tiny();
        let layer = TransformerParams::<f64>::init(&cfg, 9).layers.remove(0);
        let x = random_matrix(&mut rng, 6, cfg.latent_dim);
        let perm = [4usize, 0, 5, 2, 1, 3];
        let mut xp = x.clone();
        for (dst, &src) in perm.iter().enumerate() {
            xp.row_mut(dst).assign(&x.row(src));
        }
        let out = msa(&x, &layer, cfg.heads, false).unwrap().out;
        let out_p = msa(&xp, &layer, cfg.heads, false).unwrap().out;
        for (dst, &src) in perm.iter().enumerate() {
            for e in 0..cfg.latent_dim {
                assert!((out_p[[dst, e]] - out[[src, e]]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn captured_attention_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let cfg = ModelConfig::tiny();
        let layer = TransformerParams::<f64>::init(&cfg, 13).layers.remove(0);
        let x = random_matrix(&mut rng, 9, cfg.latent_dim);
        let attn = msa(&x, &layer, cfg.heads, true).unwrap().attention.unwrap();
        assert_eq!(attn.len(), cfg.heads);
        for head in &attn {
            assert_eq!(head.dim(), (9, 9));
            for row in head.rows() {
                assert!(row.iter().all(|&a| a >= 0.0));
                assert!((row.sum() - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn msa_rejects_non_finite_tokens() {
        let cfg = ModelConfig::tiny();
        let layer = TransformerParams::<f64>::init(&cfg, 1).layers.remove(0);
        let mut x = Array2::<f64>::zeros((3, cfg.latent_dim));
        x[[2, 1]] = f64::INFINITY;
        assert!(matches!(
            msa(&x, &layer, cfg.heads, false),
            Err(ModelError::Numeric { .. })
        ));
    }

    /// Frozen forward of a two-head MSA on seeded parameters and a fixed
    /// 4-token input. Guards against silent changes to projection layout,
    /// head slicing or softmax scaling.
    #[test]
    fn golden_msa_forward_is_stable() {
        let cfg = ModelConfig {
            input_dim: 8,
            latent_dim: 8,
            layers: 1,
            heads: 2,
            head_dim: 4,
            mlp_hidden: 16,
            num_targets: 1,
            ..ModelConfig::tiny()
        };
        let layer = TransformerParams::<f64>::init(&cfg, 0).layers.remove(0);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let x = random_matrix(&mut rng, 4, 8);
        let out = msa(&x, &layer, 2, false).unwrap().out;
        let expected = golden::MSA_SEED0_N4;
        for i in 0..4 {
            for j in 0..8 {
                assert!(
                    (out[[i, j]] - expected[i][j]).abs() <= 1e-10,
                    "mismatch at ({i}, {j}): {} vs {}",
                    out[[i, j]],
                    expected[i][j]
                );
            }
        }
    }

    mod golden {
        /// Output of `msa` with seed-0 params and the seed-2024 4x8 input.
        pub const MSA_SEED0_N4: [[f64; 8]; 4] = include!("golden_msa.in");
    }
}
