//! The transformer MIL aggregator.
//!
//! Architecture, in forward order:
//!
//! 1. Linear projection `input_dim -> latent_dim` plus ReLU on every patch
//!    embedding.
//! 2. In class-token mode, `num_targets` learned class tokens are prepended;
//!    token order is `[class tokens..., patches...]`.
//! 3. `layers` pre-LN blocks: `x += MSA(LN(x))` then `x += MLP(LN(x))`, where
//!    the MLP is `latent -> mlp_hidden -> latent` with ReLU.
//! 4. Readout: class token `i` (optionally layer-normalized) through head row
//!    `i`, or in global-average mode the mean over all patch tokens through
//!    every head row. Logits are raw; no sigmoid is applied.
//!
//! The backward pass is hand-written reverse mode over the cached forward
//! intermediates. `loss_and_grad` composes it with the masked BCE loss and
//! returns flat gradients in the same order as the tensor registry.

use ndarray::{s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::attention::{msa_backward, msa_forward_cached, MsaCache};
use super::loss::bce_with_logits;
use super::{
    check_bag, ensure_finite, Aggregation, ModelConfig, ModelError, StepOutput,
    TensorSpec, Trainable,
};
use crate::numeric::{c, Real};

const LN_EPS: f64 = 1e-12;

/// Parameters of one transformer block.
#[derive(Debug, Clone)]
pub struct LayerParams<F> {
    pub ln1_scale: Array1<F>,
    pub ln1_shift: Array1<F>,
    pub w_q: Array2<F>,
    pub w_k: Array2<F>,
    pub w_v: Array2<F>,
    pub w_o: Array2<F>,
    pub ln2_scale: Array1<F>,
    pub ln2_shift: Array1<F>,
    pub mlp_w1: Array2<F>,
    pub mlp_b1: Array1<F>,
    pub mlp_w2: Array2<F>,
    pub mlp_b2: Array1<F>,
}

/// All parameters of the transformer aggregator.
///
/// `class_tokens` has `num_targets` rows in class-token mode and zero rows in
/// global-average mode; empty tensors are excluded from the registry.
#[derive(Debug, Clone)]
pub struct TransformerParams<F> {
    pub proj_w: Array2<F>,
    pub proj_b: Array1<F>,
    pub class_tokens: Array2<F>,
    pub layers: Vec<LayerParams<F>>,
    /// `(scale, shift)` for the optional readout layer norm.
    pub head_ln: Option<(Array1<F>, Array1<F>)>,
    pub head_w: Array2<F>,
    pub head_b: Array1<F>,
}

fn uniform_init<F: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<F> {
    let bound = c::<F>(1.0 / (rows as f64).sqrt());
    Array2::from_shape_simple_fn((rows, cols), || F::uniform(rng, -bound, bound))
}

impl<F: Real> TransformerParams<F> {
    /// Seeded initialization: weight matrices are uniform within
    /// `(-1/sqrt(fan_in), 1/sqrt(fan_in))`, class tokens are N(0, 0.02^2),
    /// layer-norm scales start at 1, and all shifts and biases start at 0.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.latent_dim;
        let proj_w = uniform_init(&mut rng, cfg.input_dim, d);
        let num_tokens = match cfg.aggregation {
            Aggregation::ClassToken => cfg.num_targets,
            Aggregation::GlobalAverage => 0,
        };
        let token_sd = c::<F>(0.02);
        let class_tokens = Array2::from_shape_simple_fn((num_tokens, d), || {
            F::standard_normal(&mut rng) * token_sd
        });
        let layers = (0..cfg.layers)
            .map(|_| LayerParams {
                ln1_scale: Array1::ones(d),
                ln1_shift: Array1::zeros(d),
                w_q: uniform_init(&mut rng, d, d),
                w_k: uniform_init(&mut rng, d, d),
                w_v: uniform_init(&mut rng, d, d),
                w_o: uniform_init(&mut rng, d, d),
                ln2_scale: Array1::ones(d),
                ln2_shift: Array1::zeros(d),
                mlp_w1: uniform_init(&mut rng, d, cfg.mlp_hidden),
                mlp_b1: Array1::zeros(cfg.mlp_hidden),
                mlp_w2: uniform_init(&mut rng, cfg.mlp_hidden, d),
                mlp_b2: Array1::zeros(d),
            })
            .collect();
        let head_ln = cfg
            .head_layernorm
            .then(|| (Array1::ones(d), Array1::zeros(d)));
        let head_bound = c::<F>(1.0 / (d as f64).sqrt());
        let head_w = Array2::from_shape_simple_fn((cfg.num_targets, d), || {
            F::uniform(&mut rng, -head_bound, head_bound)
        });
        TransformerParams {
            proj_w,
            proj_b: Array1::zeros(d),
            class_tokens,
            layers,
            head_ln,
            head_w,
            head_b: Array1::zeros(cfg.num_targets),
        }
    }

    /// Same shapes as `self`, every element zero. Used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        TransformerParams {
            proj_w: Array2::zeros(self.proj_w.raw_dim()),
            proj_b: Array1::zeros(self.proj_b.raw_dim()),
            class_tokens: Array2::zeros(self.class_tokens.raw_dim()),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_scale: Array1::zeros(l.ln1_scale.raw_dim()),
                    ln1_shift: Array1::zeros(l.ln1_shift.raw_dim()),
                    w_q: Array2::zeros(l.w_q.raw_dim()),
                    w_k: Array2::zeros(l.w_k.raw_dim()),
                    w_v: Array2::zeros(l.w_v.raw_dim()),
                    w_o: Array2::zeros(l.w_o.raw_dim()),
                    ln2_scale: Array1::zeros(l.ln2_scale.raw_dim()),
                    ln2_shift: Array1::zeros(l.ln2_shift.raw_dim()),
                    mlp_w1: Array2::zeros(l.mlp_w1.raw_dim()),
                    mlp_b1: Array1::zeros(l.mlp_b1.raw_dim()),
                    mlp_w2: Array2::zeros(l.mlp_w2.raw_dim()),
                    mlp_b2: Array1::zeros(l.mlp_b2.raw_dim()),
                })
                .collect(),
            head_ln: self
                .head_ln
                .as_ref()
                .map(|(s, _)| (Array1::zeros(s.raw_dim()), Array1::zeros(s.raw_dim()))),
            head_w: Array2::zeros(self.head_w.raw_dim()),
            head_b: Array1::zeros(self.head_b.raw_dim()),
        }
    }

    /// Visits every registered tensor in canonical order.
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, Vec<usize>, &'a [F])) {
        let mat = |a: &'a Array2<F>| (vec![a.nrows(), a.ncols()], a.as_slice().unwrap());
        let vec1 = |a: &'a Array1<F>| (vec![a.len()], a.as_slice().unwrap());
        let (shape, s) = mat(&self.proj_w);
        f("proj_w".into(), shape, s);
        let (shape, s) = vec1(&self.proj_b);
        f("proj_b".into(), shape, s);
        if self.class_tokens.nrows() > 0 {
            let (shape, s) = mat(&self.class_tokens);
            f("class_tokens".into(), shape, s);
        }
        for (i, l) in self.layers.iter().enumerate() {
            let mut emit = |name: &str, shape: Vec<usize>, s: &'a [F]| {
                f(format!("layer{i}.{name}"), shape, s);
            };
            let (shape, s) = vec1(&l.ln1_scale);
            emit("ln1_scale", shape, s);
            let (shape, s) = vec1(&l.ln1_shift);
            emit("ln1_shift", shape, s);
            let (shape, s) = mat(&l.w_q);
            emit("w_q", shape, s);
            let (shape, s) = mat(&l.w_k);
            emit("w_k", shape, s);
            let (shape, s) = mat(&l.w_v);
            emit("w_v", shape, s);
            let (shape, s) = mat(&l.w_o);
            emit("w_o", shape, s);
            let (shape, s) = vec1(&l.ln2_scale);
            emit("ln2_scale", shape, s);
            let (shape, s) = vec1(&l.ln2_shift);
            emit("ln2_shift", shape, s);
            let (shape, s) = mat(&l.mlp_w1);
            emit("mlp_w1", shape, s);
            let (shape, s) = vec1(&l.mlp_b1);
            emit("mlp_b1", shape, s);
            let (shape, s) = mat(&l.mlp_w2);
            emit("mlp_w2", shape, s);
            let (shape, s) = vec1(&l.mlp_b2);
            emit("mlp_b2", shape, s);
        }
        if let Some((scale, shift)) = &self.head_ln {
            let (shape, s) = vec1(scale);
            f("head_ln_scale".into(), shape, s);
            let (shape, s) = vec1(shift);
            f("head_ln_shift".into(), shape, s);
        }
        let (shape, s) = mat(&self.head_w);
        f("head_w".into(), shape, s);
        let (shape, s) = vec1(&self.head_b);
        f("head_b".into(), shape, s);
    }

    /// Mutable twin of [`visit`]; the orders are identical by construction.
    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [F]>) {
        out.push(self.proj_w.as_slice_mut().unwrap());
        out.push(self.proj_b.as_slice_mut().unwrap());
        if self.class_tokens.nrows() > 0 {
            out.push(self.class_tokens.as_slice_mut().unwrap());
        }
        for l in self.layers.iter_mut() {
            out.push(l.ln1_scale.as_slice_mut().unwrap());
            out.push(l.ln1_shift.as_slice_mut().unwrap());
            out.push(l.w_q.as_slice_mut().unwrap());
            out.push(l.w_k.as_slice_mut().unwrap());
            out.push(l.w_v.as_slice_mut().unwrap());
            out.push(l.w_o.as_slice_mut().unwrap());
            out.push(l.ln2_scale.as_slice_mut().unwrap());
            out.push(l.ln2_shift.as_slice_mut().unwrap());
            out.push(l.mlp_w1.as_slice_mut().unwrap());
            out.push(l.mlp_b1.as_slice_mut().unwrap());
            out.push(l.mlp_w2.as_slice_mut().unwrap());
            out.push(l.mlp_b2.as_slice_mut().unwrap());
        }
        if let Some((scale, shift)) = &mut self.head_ln {
            out.push(scale.as_slice_mut().unwrap());
            out.push(shift.as_slice_mut().unwrap());
        }
        out.push(self.head_w.as_slice_mut().unwrap());
        out.push(self.head_b.as_slice_mut().unwrap());
    }

    pub fn tensor_specs(&self) -> Vec<TensorSpec> {
        let mut specs = Vec::new();
        self.visit(&mut |name, shape, _| specs.push(TensorSpec { name, shape }));
        specs
    }

    pub fn tensor_slices(&self) -> Vec<&[F]> {
        let mut out = Vec::new();
        self.visit(&mut |_, _, s| out.push(s));
        out
    }

    pub fn tensor_slices_mut(&mut self) -> Vec<&mut [F]> {
        let mut out = Vec::new();
        self.visit_mut(&mut out);
        out
    }

    /// Flattens a gradient container into per-tensor vectors in registry order.
    fn flatten(&self) -> Vec<Vec<F>> {
        let mut out = Vec::new();
        self.visit(&mut |_, _, s| out.push(s.to_vec()));
        out
    }
}

/// Per-layer-norm cache: normalized activations and inverse std per row.
#[derive(Debug, Clone)]
struct LnCache<F> {
    xhat: Array2<F>,
    inv_std: Array1<F>,
}

/// Row-wise layer norm. Returns the output and the cache for backward.
fn layer_norm_forward<F: Real>(
    x: &Array2<F>,
    scale: &Array1<F>,
    shift: &Array1<F>,
) -> (Array2<F>, LnCache<F>) {
    let (n, d) = x.dim();
    let inv_d = F::one() / c::<F>(d as f64);
    let eps = c::<F>(LN_EPS);
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(n);
    for (i, mut row) in xhat.rows_mut().into_iter().enumerate() {
        let mean = row.sum() * inv_d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<F>() * inv_d;
        let inv = F::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| v * inv);
        inv_std[i] = inv;
    }
    let mut y = xhat.clone();
    for mut row in y.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = *v * scale[j] + shift[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

/// Backward through a row-wise layer norm: accumulates scale/shift gradients
/// and returns the gradient w.r.t. the pre-norm input.
fn layer_norm_backward<F: Real>(
    dy: &Array2<F>,
    cache: &LnCache<F>,
    scale: &Array1<F>,
    dscale: &mut Array1<F>,
    dshift: &mut Array1<F>,
) -> Array2<F> {
    let (n, d) = dy.dim();
    let inv_d = F::one() / c::<F>(d as f64);
    let mut dx = Array2::zeros((n, d));
    for i in 0..n {
        let mut mean_dxhat = F::zero();
        let mut mean_dxhat_xhat = F::zero();
        for j in 0..d {
            let g = dy[[i, j]];
            let xh = cache.xhat[[i, j]];
            dscale[j] += g * xh;
            dshift[j] += g;
            let dxh = g * scale[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh;
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let inv = cache.inv_std[i];
        for j in 0..d {
            let dxh = dy[[i, j]] * scale[j];
            dx[[i, j]] = (dxh - mean_dxhat - cache.xhat[[i, j]] * mean_dxhat_xhat) * inv;
        }
    }
    dx
}

struct LayerForward<F> {
    ln1: LnCache<F>,
    u: Array2<F>,
    msa: MsaCache<F>,
    drop_msa: Option<Array2<F>>,
    ln2: LnCache<F>,
    vln: Array2<F>,
    h_act: Array2<F>,
    drop_mlp: Option<Array2<F>>,
}

struct ForwardPass<F> {
    /// Projected, ReLU-activated patch embeddings (`n x latent`).
    x_act: Array2<F>,
    layers: Vec<LayerForward<F>>,
    final_tokens: Array2<F>,
    /// Rows fed to the head (post optional layer norm).
    readout: Array2<F>,
    head_ln: Option<LnCache<F>>,
    logits: Array1<F>,
}

enum DropoutMode<'a> {
    Off,
    On(&'a mut ChaCha8Rng),
}

/// The transformer aggregator: config plus parameters.
#[derive(Debug, Clone)]
pub struct TransformerModel<F: Real> {
    pub config: ModelConfig,
    pub params: TransformerParams<F>,
}

/// Post-softmax attention matrices for every layer and head, in token order
/// `[class tokens..., patches...]`.
#[derive(Debug, Clone)]
pub struct AttentionTrace<F> {
    pub num_class_tokens: usize,
    pub num_patches: usize,
    /// `layers[l][h]` is the `(t + n) x (t + n)` attention of head `h`.
    pub layers: Vec<Vec<Array2<F>>>,
}

impl<F: Real> TransformerModel<F> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let params = TransformerParams::init(&config, seed);
        Ok(TransformerModel { config, params })
    }

    /// Forward pass producing one raw logit per target.
    pub fn forward(&self, bag: &Array2<F>) -> Result<Array1<F>, ModelError> {
        Ok(self.forward_cached(bag, DropoutMode::Off)?.logits)
    }

    /// Forward pass that also captures every attention matrix.
    pub fn forward_traced(
        &self,
        bag: &Array2<F>,
    ) -> Result<(Array1<F>, AttentionTrace<F>), ModelError> {
        let pass = self.forward_cached(bag, DropoutMode::Off)?;
        let trace = AttentionTrace {
            num_class_tokens: self.params.class_tokens.nrows(),
            num_patches: bag.nrows(),
            layers: pass
                .layers
                .iter()
                .map(|l| l.msa.attn.clone())
                .collect(),
        };
        Ok((pass.logits, trace))
    }

    fn dropout_mask(
        &self,
        shape: (usize, usize),
        mode: &mut DropoutMode<'_>,
    ) -> Result<Option<Array2<F>>, ModelError> {
        let p = self.config.dropout;
        if p == 0.0 {
            return Ok(None);
        }
        match mode {
            DropoutMode::Off => Ok(None),
            DropoutMode::On(rng) => {
                let keep = c::<F>(1.0 / (1.0 - p));
                let mask = Array2::from_shape_simple_fn(shape, || {
                    if F::uniform(rng, F::zero(), F::one()) < c::<F>(p) {
                        F::zero()
                    } else {
                        keep
                    }
                });
                Ok(Some(mask))
            }
        }
    }

    fn forward_cached(
        &self,
        bag: &Array2<F>,
        mut dropout: DropoutMode<'_>,
    ) -> Result<ForwardPass<F>, ModelError> {
        let cfg = &self.config;
        let p = &self.params;
        check_bag(bag, cfg.input_dim)?;
        let n = bag.nrows();
        let t = p.class_tokens.nrows();
        let m = t + n;

        let mut x_act = bag.dot(&p.proj_w);
        for mut row in x_act.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v + p.proj_b[j]).max(F::zero());
            }
        }

        let mut tokens = Array2::zeros((m, cfg.latent_dim));
        if t > 0 {
            tokens.slice_mut(s![..t, ..]).assign(&p.class_tokens);
        }
        tokens.slice_mut(s![t.., ..]).assign(&x_act);

        let mut layer_caches = Vec::with_capacity(cfg.layers);
        for layer in &p.layers {
            let (u, ln1) = layer_norm_forward(&tokens, &layer.ln1_scale, &layer.ln1_shift);
            let (mut msa_out, msa_cache) =
                msa_forward_cached(&u, layer, cfg.heads, cfg.head_dim)?;
            let drop_msa = self.dropout_mask((m, cfg.latent_dim), &mut dropout)?;
            if let Some(mask) = &drop_msa {
                msa_out *= mask;
            }
            tokens += &msa_out;

            let (vln, ln2) = layer_norm_forward(&tokens, &layer.ln2_scale, &layer.ln2_shift);
            let mut h_act = vln.dot(&layer.mlp_w1);
            for mut row in h_act.rows_mut() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (*v + layer.mlp_b1[j]).max(F::zero());
                }
            }
            let mut mlp_out = h_act.dot(&layer.mlp_w2);
            for mut row in mlp_out.rows_mut() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = *v + layer.mlp_b2[j];
                }
            }
            let drop_mlp = self.dropout_mask((m, cfg.latent_dim), &mut dropout)?;
            if let Some(mask) = &drop_mlp {
                mlp_out *= mask;
            }
            tokens += &mlp_out;

            layer_caches.push(LayerForward {
                ln1,
                u,
                msa: msa_cache,
                drop_msa,
                ln2,
                vln,
                h_act,
                drop_mlp,
            });
        }

        let pre_readout: Array2<F> = match cfg.aggregation {
            Aggregation::ClassToken => tokens.slice(s![..t, ..]).to_owned(),
            Aggregation::GlobalAverage => {
                let mean = tokens.mean_axis(Axis(0)).expect("non-empty bag");
                mean.insert_axis(Axis(0))
            }
        };
        let (readout, head_ln) = match (&p.head_ln, cfg.head_layernorm) {
            (Some((scale, shift)), true) => {
                let (y, cache) = layer_norm_forward(&pre_readout, scale, shift);
                (y, Some(cache))
            }
            _ => (pre_readout, None),
        };

        let mut logits = Array1::zeros(cfg.num_targets);
        for i in 0..cfg.num_targets {
            let row = match cfg.aggregation {
                Aggregation::ClassToken => readout.row(i),
                Aggregation::GlobalAverage => readout.row(0),
            };
            logits[i] = row.dot(&p.head_w.row(i)) + p.head_b[i];
        }
        ensure_finite(&logits, "logits")?;

        Ok(ForwardPass {
            x_act,
            layers: layer_caches,
            final_tokens: tokens,
            readout,
            head_ln,
            logits,
        })
    }

    /// Reverse-mode pass: gradient of the logits' scalar pullback `dlogits`
    /// w.r.t. every parameter tensor.
    fn backward(
        &self,
        bag: &Array2<F>,
        pass: &ForwardPass<F>,
        dlogits: &Array1<F>,
    ) -> TransformerParams<F> {
        let cfg = &self.config;
        let p = &self.params;
        let n = bag.nrows();
        let t = p.class_tokens.nrows();
        let m = t + n;
        let mut g = p.zeros_like();

        // Head and readout.
        let readout_rows = pass.readout.nrows();
        let mut dreadout = Array2::<F>::zeros((readout_rows, cfg.latent_dim));
        for i in 0..cfg.num_targets {
            let dl = dlogits[i];
            let row = match cfg.aggregation {
                Aggregation::ClassToken => pass.readout.row(i),
                Aggregation::GlobalAverage => pass.readout.row(0),
            };
            for j in 0..cfg.latent_dim {
                g.head_w[[i, j]] += dl * row[j];
            }
            g.head_b[i] += dl;
            let target_row = match cfg.aggregation {
                Aggregation::ClassToken => i,
                Aggregation::GlobalAverage => 0,
            };
            for j in 0..cfg.latent_dim {
                dreadout[[target_row, j]] += dl * p.head_w[[i, j]];
            }
        }
        let dpre_readout = match (&pass.head_ln, &p.head_ln, &mut g.head_ln) {
            (Some(cache), Some((scale, _)), Some((dscale, dshift))) => {
                layer_norm_backward(&dreadout, cache, scale, dscale, dshift)
            }
            _ => dreadout,
        };

        let mut dtokens = Array2::<F>::zeros((m, cfg.latent_dim));
        match cfg.aggregation {
            Aggregation::ClassToken => {
                dtokens.slice_mut(s![..t, ..]).assign(&dpre_readout);
            }
            Aggregation::GlobalAverage => {
                let inv_m = F::one() / c::<F>(m as f64);
                for i in 0..m {
                    for j in 0..cfg.latent_dim {
                        dtokens[[i, j]] = dpre_readout[[0, j]] * inv_m;
                    }
                }
            }
        }

        // Blocks in reverse.
        for (layer, (fwd, gl)) in p
            .layers
            .iter()
            .zip(pass.layers.iter().zip(g.layers.iter_mut()))
            .rev()
        {
            // MLP sublayer: tokens_out = tokens_mid + drop(mlp(ln2(tokens_mid))).
            let mut dmlp_out = dtokens.clone();
            if let Some(mask) = &fwd.drop_mlp {
                dmlp_out *= mask;
            }
            let mut dh_act = dmlp_out.dot(&layer.mlp_w2.t());
            gl.mlp_w2 += &fwd.h_act.t().dot(&dmlp_out);
            gl.mlp_b2 += &dmlp_out.sum_axis(Axis(0));
            for (dh, h) in dh_act.iter_mut().zip(fwd.h_act.iter()) {
                if *h <= F::zero() {
                    *dh = F::zero();
                }
            }
            gl.mlp_w1 += &fwd.vln.t().dot(&dh_act);
            gl.mlp_b1 += &dh_act.sum_axis(Axis(0));
            let dvln = dh_act.dot(&layer.mlp_w1.t());
            let dmid_ln = layer_norm_backward(
                &dvln,
                &fwd.ln2,
                &layer.ln2_scale,
                &mut gl.ln2_scale,
                &mut gl.ln2_shift,
            );
            dtokens += &dmid_ln;

            // MSA sublayer: tokens_mid = tokens_in + drop(msa(ln1(tokens_in))).
            let mut dmsa_out = dtokens.clone();
            if let Some(mask) = &fwd.drop_msa {
                dmsa_out *= mask;
            }
            let du = msa_backward(
                &dmsa_out,
                &fwd.u,
                layer,
                &fwd.msa,
                cfg.heads,
                cfg.head_dim,
                gl,
            );
            let din_ln = layer_norm_backward(
                &du,
                &fwd.ln1,
                &layer.ln1_scale,
                &mut gl.ln1_scale,
                &mut gl.ln1_shift,
            );
            dtokens += &din_ln;
        }

        // Embedding projection and class tokens.
        if t > 0 {
            g.class_tokens += &dtokens.slice(s![..t, ..]);
        }
        let mut dx_lin = dtokens.slice(s![t.., ..]).to_owned();
        for (dv, v) in dx_lin.iter_mut().zip(pass.x_act.iter()) {
            if *v <= F::zero() {
                *dv = F::zero();
            }
        }
        g.proj_w += &bag.t().dot(&dx_lin);
        g.proj_b += &dx_lin.sum_axis(Axis(0));
        g
    }
}

impl<F: Real> Trainable<F> for TransformerModel<F> {
    fn tensor_specs(&self) -> Vec<TensorSpec> {
        self.params.tensor_specs()
    }
    fn tensors(&self) -> Vec<&[F]> {
        self.params.tensor_slices()
    }
    fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        self.params.tensor_slices_mut()
    }
    fn num_targets(&self) -> usize {
        self.config.num_targets
    }
    fn logits(&self, bag: &Array2<F>) -> Result<Array1<F>, ModelError> {
        self.forward(bag)
    }
    fn loss_and_grad(
        &self,
        bag: &Array2<F>,
        labels: &[Option<u8>],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<StepOutput<F>, ModelError> {
        let mode = match (self.config.dropout > 0.0, rng) {
            (true, Some(rng)) => DropoutMode::On(rng),
            (true, None) => {
                return Err(ModelError::InvalidConfig {
                    reason: "dropout > 0 requires an rng".into(),
                })
            }
            (false, _) => DropoutMode::Off,
        };
        let pass = self.forward_cached(bag, mode)?;
        let (loss, dlogits) = bce_with_logits(&pass.logits, labels)?;
        let grads = self.backward(bag, &pass, &dlogits);
        Ok(StepOutput {
            loss,
            logits: pass.logits,
            grads: grads.flatten(),
        })
    }
}
