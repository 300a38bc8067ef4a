//! AdamW with decoupled weight decay, plus the cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::store::{ParameterStore, MOMENT1_SUFFIX, MOMENT2_SUFFIX, STEP_KEY};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Cosine annealing from `base` at epoch 0 to 0 at epoch `total`.
pub fn cosine_lr(base: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (epoch as f64 / total as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// One AdamW step over every trainable parameter in the store.
///
/// Weight decay is decoupled: parameters shrink by `lr * wd` directly rather
/// than through the gradient, so zero gradients still decay weights by
/// exactly `(1 - lr*wd)`. First and second moments persist in the store
/// under `<name>.m1` / `<name>.m2`, the step counter under `optim.step`.
pub fn optimizer_step(store: &mut ParameterStore, lr: f64, wd: f64) -> Result<()> {
    let names = store.trainable_names();
    for name in &names {
        if store.get(name)?.grad.is_none() {
            return Err(Error::State(format!(
                "optimizer_step: parameter {name:?} has no gradient"
            )));
        }
    }

    if !store.contains(STEP_KEY) {
        store.insert(STEP_KEY, Tensor::zeros(vec![1]))?;
    }
    let t = {
        let step = store.get_mut(STEP_KEY)?;
        step.data[0] += 1.0;
        step.data[0]
    };
    let bc1 = 1.0 - BETA1.powf(t);
    let bc2 = 1.0 - BETA2.powf(t);

    for name in &names {
        let m1_key = format!("{name}{MOMENT1_SUFFIX}");
        let m2_key = format!("{name}{MOMENT2_SUFFIX}");
        let (shape, grad) = {
            let p = store.get(name)?;
            (p.shape.clone(), p.grad.clone().unwrap())
        };
        if !store.contains(&m1_key) {
            store.insert(&m1_key, Tensor::zeros(shape.clone()))?;
            store.insert(&m2_key, Tensor::zeros(shape.clone()))?;
        }

        {
            let m1 = store.get_mut(&m1_key)?;
            for (m, &g) in m1.data.iter_mut().zip(&grad) {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
            }
        }
        {
            let m2 = store.get_mut(&m2_key)?;
            for (v, &g) in m2.data.iter_mut().zip(&grad) {
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            }
        }
        let m1 = store.get(&m1_key)?.data.clone();
        let m2 = store.get(&m2_key)?.data.clone();
        let p = store.get_mut(name)?;
        for i in 0..p.data.len() {
            let mhat = m1[i] / bc1;
            let vhat = m2[i] / bc2;
            p.data[i] = p.data[i] * (1.0 - lr * wd) - lr * mhat / (vhat.sqrt() + EPS);
            if !p.data[i].is_finite() {
                return Err(Error::Numeric(format!(
                    "optimizer_step: parameter {name:?} became non-finite at index {i}"
                )));
            }
        }
    }
    Ok(())
}
