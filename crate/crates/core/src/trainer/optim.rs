//! AdamW with a reduced-rate backbone group, the step schedule and gradient
//! clipping.

use crate::error::{Error, Result};
use crate::params::ModelParams;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Parameters of the patch embedding and the joint blocks.
pub fn is_backbone(name: &str) -> bool {
    name.starts_with("embed.") || name.starts_with("blocks.")
}

/// First and second moments, flattened in parameter visiting order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Completed steps.
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let mut m = Vec::new();
        params.visit(&mut |_, t| m.push(vec![0.0; t.len()]));
        AdamState {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepConfig {
    /// Rate of the non-backbone group.
    pub lr: f64,
    pub weight_decay: f64,
    pub backbone_lr_factor: f64,
}

/// One bias-corrected AdamW step. Decay `p ← p − lr·wd·p` is applied before
/// the moment update, with each group's own rate.
pub fn optimizer_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    cfg: &StepConfig,
) -> Result<()> {
    let grads = grads.named_tensors();
    let mut n_params = 0;
    params.visit(&mut |_, _| n_params += 1);
    if grads.len() != n_params || state.m.len() != n_params {
        return Err(Error::Contract("parameter, gradient and moment lists differ".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    let mut idx = 0;
    let mut bad = None;
    params.visit_mut(&mut |name, p| {
        let (gname, g) = &grads[idx];
        if gname != name || g.shape() != p.shape() {
            bad = Some(name.to_string());
        } else {
            let lr = if is_backbone(name) {
                cfg.lr * cfg.backbone_lr_factor
            } else {
                cfg.lr
            };
            let (m, v) = (&mut state.m[idx], &mut state.v[idx]);
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *pi -= lr * cfg.weight_decay * *pi;
                *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
                *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
                *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
            }
        }
        idx += 1;
    });
    match bad {
        Some(name) => Err(Error::Contract(format!("gradient for `{name}` does not match"))),
        None => Ok(()),
    }
}

/// Step schedule: the base rate until `drop_frac` of the run, a tenth after.
pub fn lr_at(iteration: usize, total: usize, base: f64, drop_frac: f64) -> f64 {
    if iteration as f64 >= drop_frac * total as f64 {
        base * 0.1
    } else {
        base
    }
}

/// Bootstrap fraction falling linearly from `start` to `end` over the first
/// `warm_frac` of the run.
pub fn bootstrap_at(iteration: usize, total: usize, start: f64, end: f64, warm_frac: f64) -> f64 {
    let warm = warm_frac * total as f64;
    if warm <= 0.0 || iteration as f64 >= warm {
        return end;
    }
    start + (end - start) * iteration as f64 / warm
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut ModelParams, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    grads.visit(&mut |_, g| sq += g.data().iter().map(|x| x * x).sum::<f64>());
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.visit_mut(&mut |_, g| g.data_mut().iter_mut().for_each(|x| *x *= s));
    }
    norm
}
