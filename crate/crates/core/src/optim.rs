//! AdamW with decoupled weight decay, and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, usage_err, Result};
use crate::tensor::Tensor;

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamW {
    pub lr: f32,
    pub betas: (f32, f32),
    #[serde(default = "default_eps")]
    pub eps: f32,
    #[serde(default)]
    pub weight_decay: f32,
}

fn default_eps() -> f32 {
    1e-8
}

impl Default for AdamW {
    fn default() -> Self {
        Self { lr: 3e-5, betas: (0.9, 0.95), eps: 1e-8, weight_decay: 0.0 }
    }
}

/// First and second moments for one parameter set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: u64,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One AdamW update of `params` in place using `grads` (same order and shapes).
pub fn adamw_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut OptimizerState, cfg: &AdamW) -> Result<()> {
    if cfg.lr.is_nan() || cfg.lr <= 0.0 {
        return Err(usage_err!("learning rate must be positive, got {}", cfg.lr));
    }
    if params.len() != grads.len() {
        return Err(dim_err!("{} parameters but {} gradients", params.len(), grads.len()));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(dim_err!("parameter {:?} vs gradient {:?}", p.shape(), g.shape()));
        }
    }
    if state.step == 0 {
        state.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        state.v = state.m.clone();
    } else if state.m.len() != params.len() || state.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel()) {
        return Err(dim_err!("optimizer state does not match the parameter set"));
    }
    state.step += 1;
    let (b1, b2) = cfg.betas;
    let t = state.step as i32;
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *w = *w * decay - cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Global L2 norm over all gradients, accumulated in `f64`.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
///
/// A relative slack of 1e-6 absorbs the rounding of the rescaled values, so
/// clipping an already clipped set is a no-op.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f32) -> Result<f64> {
    if max_norm.is_nan() || max_norm <= 0.0 {
        return Err(usage_err!("max_norm must be positive, got {max_norm}"));
    }
    let norm = global_norm(grads);
    let max = f64::from(max_norm);
    if norm > max * (1.0 + 1e-6) {
        let scale = (max / norm) as f32;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
    }
    Ok(norm)
}
