//! Adam-family optimizer steps and the one-cycle schedule.

use super::TrainError;
use crate::model::{ModelError, TensorSpec};
use crate::numeric::{c, Real};

/// First and second moment estimates for every registered tensor, plus the
/// bias-correction step counter.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
    /// Number of applied steps; skipped steps do not advance it.
    pub t: u64,
}

impl<F: Real> AdamState<F> {
    pub fn new(specs: &[TensorSpec]) -> Self {
        let zeros: Vec<Vec<F>> = specs
            .iter()
            .map(|s| vec![F::zero(); s.num_elements()])
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

fn check_grads<F: Real>(grads: &[Vec<F>]) -> Result<(), TrainError> {
    for g in grads {
        if !g.iter().all(|v| v.is_finite()) {
            return Err(TrainError::Model(ModelError::Numeric {
                context: "gradients".into(),
            }));
        }
    }
    Ok(())
}

fn adaptive_update<F: Real>(
    params: &mut [&mut [F]],
    grads: &[Vec<F>],
    state: &mut AdamState<F>,
    lr: f64,
    l2_into_grad: f64,
) {
    state.t += 1;
    let t = state.t as i32;
    let b1 = c::<F>(BETA1);
    let b2 = c::<F>(BETA2);
    let one = F::one();
    let bias1 = one - b1.powi(t);
    let bias2 = one - b2.powi(t);
    let lr_f = c::<F>(lr);
    let eps = c::<F>(EPS);
    let l2 = c::<F>(l2_into_grad);

    for ((slot, grad), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for i in 0..slot.len() {
            let g = grad[i] + l2 * slot[i];
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            slot[i] = slot[i] - lr_f * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// One AdamW step: decoupled weight decay `theta <- theta * (1 - lr*wd)`
/// applied first, then the bias-corrected adaptive update with beta1 0.9,
/// beta2 0.999, epsilon 1e-8.
///
/// Non-finite gradients are rejected before anything is mutated, so a failed
/// step leaves parameters, moments and the step counter untouched; callers
/// count the skip and move on.
pub fn adamw_step<F: Real>(
    params: &mut [&mut [F]],
    grads: &[Vec<F>],
    state: &mut AdamState<F>,
    lr: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    check_grads(grads)?;
    let shrink = c::<F>(1.0 - lr * weight_decay);
    if weight_decay != 0.0 {
        for slot in params.iter_mut() {
            for p in slot.iter_mut() {
                *p = *p * shrink;
            }
        }
    }
    adaptive_update(params, grads, state, lr, 0.0);
    Ok(())
}

/// One classic Adam step; `weight_decay` enters as an L2 term added to the
/// gradient rather than as a decoupled shrink.
pub fn adam_step<F: Real>(
    params: &mut [&mut [F]],
    grads: &[Vec<F>],
    state: &mut AdamState<F>,
    lr: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    check_grads(grads)?;
    adaptive_update(params, grads, state, lr, weight_decay);
    Ok(())
}

/// Cosine one-cycle learning rate.
///
/// Ramps from `max_lr / 25` at step 0 up to `max_lr` at
/// `warmup_frac * total_steps` along a half cosine, then decays along
/// another half cosine down to `max_lr / 1e4` at `total_steps`.
pub fn one_cycle_lr(step: usize, total_steps: usize, max_lr: f64, warmup_frac: f64) -> f64 {
    let start = max_lr / 25.0;
    let end = max_lr / 1e4;
    let total = total_steps as f64;
    let warmup = warmup_frac * total;
    let s = (step as f64).min(total);
    if s < warmup {
        let phase = s / warmup;
        start + (max_lr - start) * (1.0 - (std::f64::consts::PI * phase).cos()) / 2.0
    } else if total > warmup {
        let phase = (s - warmup) / (total - warmup);
        end + (max_lr - end) * (1.0 + (std::f64::consts::PI * phase).cos()) / 2.0
    } else {
        max_lr
    }
}
