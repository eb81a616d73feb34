use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainError};
use crate::diff_engine::Tensor;

/// AdamW moments, mirroring the parameter list, and the step counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }
}

/// One decoupled-weight-decay Adam step:
/// `θ ← θ − lr·(m̂ / (√v̂ + ε) + wd·θ)`.
///
/// Every gradient is checked before anything is written, so a rejected step
/// leaves both parameters and state untouched.
pub fn adamw_step(
    params: &mut [Tensor],
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(TrainError::Shape(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if g.len() != p.numel() || state.m[i].len() != p.numel() || state.v[i].len() != p.numel() {
            return Err(TrainError::Shape(format!("gradient {i} has {} values for {} parameters", g.len(), p.numel())));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFinite { what: format!("gradient of parameter {i}"), epoch: 0 });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((theta, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *theta -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps_adam) + cfg.weight_decay * *theta);
        }
    }
    Ok(())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}
