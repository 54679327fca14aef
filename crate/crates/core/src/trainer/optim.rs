use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tensor};
use crate::error::{MuseError, Result};

/// Adaptive-moment hyperparameters with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// Per-parameter moments and step counts.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Real> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub steps: Vec<u64>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        OptimizerState {
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            steps: vec![0; params.len()],
        }
    }
}

/// How one parameter is updated.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamPolicy {
    pub name: String,
    pub weight_decay: bool,
    pub frozen: bool,
}

impl ParamPolicy {
    pub fn trainable(name: &str, weight_decay: bool) -> Self {
        ParamPolicy { name: name.to_string(), weight_decay, frozen: false }
    }
}

/// One update of every non-frozen parameter:
/// `p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`.
/// Frozen parameters keep their values and moments. `step` is only used to
/// label errors.
pub fn optimizer_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Vec<T>],
    state: &mut OptimizerState<T>,
    hyper: &AdamW,
    lr: f64,
    policy: &[ParamPolicy],
    step: u64,
) -> Result<()> {
    if grads.len() != params.len() || policy.len() != params.len() || state.m.len() != params.len() {
        return Err(MuseError::Argument(format!(
            "optimizer got {} params, {} grads, {} policies, {} moment slots",
            params.len(),
            grads.len(),
            policy.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.len() != params[i].numel() {
            return Err(MuseError::dim("optimizer_step", &[g.len()], params[i].shape()));
        }
        if !policy[i].frozen && g.iter().any(|v| !v.is_finite()) {
            return Err(MuseError::NonFinite { step, name: format!("gradient of {}", policy[i].name) });
        }
    }
    let (b1, b2) = (T::of(hyper.beta1), T::of(hyper.beta2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    let eps = T::of(hyper.eps);
    for i in 0..params.len() {
        if policy[i].frozen {
            continue;
        }
        state.steps[i] += 1;
        let s = state.steps[i] as i32;
        let c1 = T::of(1.0 / (1.0 - hyper.beta1.powi(s)));
        let c2 = T::of(1.0 / (1.0 - hyper.beta2.powi(s)));
        let lr_t = T::of(lr);
        let shrink = if policy[i].weight_decay { T::one() - T::of(lr * hyper.weight_decay) } else { T::one() };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((p, &g), m), v) in params[i].data_mut().iter_mut().zip(&grads[i]).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let update = (*m * c1) / ((*v * c2).sqrt() + eps);
            *p = *p * shrink - lr_t * update;
        }
    }
    Ok(())
}

/// Linear warmup over the first `warmup` steps of a stage, then constant.
pub fn warmup_lr(base: f64, step_in_stage: usize, warmup: usize) -> f64 {
    if warmup == 0 || step_in_stage >= warmup {
        base
    } else {
        base * (step_in_stage + 1) as f64 / warmup as f64
    }
}
