use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::model::{ParamSet, Real};

/// Cosine annealing from `lr_max` at step 0 to `lr_min` at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::InvalidArgument(
            "total_steps must be positive".into(),
        ));
    }
    if step > total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} beyond schedule of {total_steps}"
        )));
    }
    let t = step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * t).cos()))
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// AdamW moments for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub first: ParamSet<T>,
    pub second: ParamSet<T>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        Self {
            first: params.zeros_like(),
            second: params.zeros_like(),
            step: 0,
        }
    }
}

/// One AdamW update: decoupled decay `θ -= lr·wd·θ`, then the
/// bias-corrected moment step. Non-finite gradients leave everything
/// untouched and return an error naming the tensor.
pub fn optimizer_step<T: Real>(
    params: &mut ParamSet<T>,
    state: &mut AdamState<T>,
    grads: &ParamSet<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    params.ensure_compatible(grads)?;
    params.ensure_compatible(&state.first)?;
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    let decay = 1.0 - lr * weight_decay;
    let tensors = params
        .iter_mut()
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
        .zip(grads.iter());
    for ((((_, p), (_, m)), (_, v)), (_, g)) in tensors {
        for i in 0..p.data.len() {
            let gi = g.data[i].f64();
            let mi = BETA1 * m.data[i].f64() + (1.0 - BETA1) * gi;
            let vi = BETA2 * v.data[i].f64() + (1.0 - BETA2) * gi * gi;
            m.data[i] = T::of(mi);
            v.data[i] = T::of(vi);
            let theta = p.data[i].f64() * decay;
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + ADAM_EPS);
            p.data[i] = T::of(theta - update);
        }
    }
    Ok(())
}
