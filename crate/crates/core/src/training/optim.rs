use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
    pub hp: AdamWParams,
}

impl OptimState {
    pub fn new(params: &[Matrix], hp: AdamWParams) -> Self {
        let zeros = || params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            hp,
        }
    }
}

/// One AdamW update with decoupled weight decay applied to parameters
/// whose `decay` flag is set.
pub fn adamw_step(params: &mut [Matrix], grads: &[Matrix], decay: &[bool], state: &mut OptimState, lr: f64) -> Result<()> {
    ensure!(
        params.len() == grads.len() && params.len() == state.m.len() && params.len() == decay.len(),
        "optimizer got {} params, {} grads, {} decay flags for {} moment buffers",
        params.len(),
        grads.len(),
        decay.len(),
        state.m.len()
    );
    for (p, g) in params.iter().zip(grads) {
        ensure!(p.shape() == g.shape(), "gradient shape {:?} != parameter shape {:?}", g.shape(), p.shape());
    }
    state.step += 1;
    let hp = state.hp;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let shrink = if decay[i] { 1.0 - lr * hp.weight_decay } else { 1.0 };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((pj, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mj = hp.beta1 * *mj + (1.0 - hp.beta1) * gj;
            *vj = hp.beta2 * *vj + (1.0 - hp.beta2) * gj * gj;
            let mhat = *mj / c1;
            let vhat = *vj / c2;
            *pj = *pj * shrink - lr * mhat / (vhat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `lr_max` over `warmup` steps, then cosine decay
/// to `lr_min` at `total`.
pub fn cosine_schedule(step: usize, total: usize, warmup: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    ensure!(step <= total, "step {step} beyond schedule length {total}");
    ensure!(warmup <= total, "warmup {warmup} longer than schedule {total}");
    if step < warmup {
        return Ok(lr_max * step as f64 / warmup as f64);
    }
    if total == warmup {
        return Ok(lr_max);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

pub fn global_norm(grads: &[Matrix]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}
