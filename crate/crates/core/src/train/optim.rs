//! AdamW and LAMB with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParams, Part, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    AdamW,
    Lamb,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimHyper {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Per-tensor moment accumulators and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Updates the moments of one tensor and returns the unscaled update
/// `m_hat / (sqrt(v_hat) + eps) + wd * theta`.
fn adam_direction(theta: &[f64], g: &[f64], m: &mut [f64], v: &mut [f64], h: &OptimHyper, t: u64) -> Vec<f64> {
    let c1 = 1.0 - h.beta1.powi(t as i32);
    let c2 = 1.0 - h.beta2.powi(t as i32);
    let mut u = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        u.push(mh / (vh.sqrt() + h.eps) + h.weight_decay * theta[i]);
    }
    u
}

/// Biases and norm parameters keep a unit trust ratio, following the
/// reference LAMB implementation's exclusion list.
pub fn layer_adapted(t: &Tensor) -> bool {
    !(t.name.ends_with(".b") || t.name.ends_with(".g"))
}

fn check(params: &ModelParams, grads: &ModelParams, state: &OptimState) -> Result<()> {
    if params.tensors().len() != grads.tensors().len() || state.m.len() != params.tensors().len() {
        return Err(Error::Shape("optimizer inputs disagree in tensor count".into()));
    }
    for (i, (p, g)) in params.tensors().iter().zip(grads.tensors()).enumerate() {
        if p.len() != g.len() || state.m[i].len() != p.len() || state.v[i].len() != p.len() {
            return Err(Error::Shape(format!("optimizer shapes disagree for '{}'", p.name)));
        }
        if g.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", p.name)));
        }
    }
    Ok(())
}

fn step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptimState,
    h: &OptimHyper,
    parts: &[Part],
    trust: bool,
) -> Result<()> {
    check(params, grads, state)?;
    state.t += 1;
    let t = state.t;
    for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads.tensors()).enumerate() {
        if !parts.contains(&p.part) {
            continue;
        }
        let u = adam_direction(&p.data, &g.data, &mut state.m[i], &mut state.v[i], h, t);
        let r = if trust && layer_adapted(p) {
            let pn = p.data.iter().map(|v| v * v).sum::<f64>().sqrt();
            let un = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            if pn == 0.0 || un == 0.0 {
                1.0
            } else {
                pn / un
            }
        } else {
            1.0
        };
        for (x, d) in p.data.iter_mut().zip(&u) {
            *x -= h.lr * r * d;
        }
        if let Some(bad) = p.data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{} after update ({bad})", p.name)));
        }
    }
    Ok(())
}

/// One AdamW step on the tensors belonging to `parts`.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptimState,
    h: &OptimHyper,
    parts: &[Part],
) -> Result<()> {
    step(params, grads, state, h, parts, false)
}

/// One LAMB step: the AdamW direction scaled per tensor by
/// `|theta| / |u|`, or by 1 when either norm is zero or the tensor is not
/// [`layer_adapted`].
pub fn lamb_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptimState,
    h: &OptimHyper,
    parts: &[Part],
) -> Result<()> {
    step(params, grads, state, h, parts, true)
}

pub fn optimizer_step(
    kind: OptimizerKind,
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptimState,
    h: &OptimHyper,
    parts: &[Part],
) -> Result<()> {
    match kind {
        OptimizerKind::AdamW => adamw_step(params, grads, state, h, parts),
        OptimizerKind::Lamb => lamb_step(params, grads, state, h, parts),
    }
}
