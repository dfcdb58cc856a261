//! Adam with global-norm clipping.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Gradients, ModelParams};
use crate::tensor::{quantize_f32, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

/// First and second moments, aligned with [`ModelParams::named_tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub applied: bool,
    /// Norm before clipping.
    pub grad_norm: f64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Matrix> = params
            .named_tensors()
            .into_iter()
            .map(|(_, m)| Matrix::zeros(m.rows, m.cols))
            .collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Clips `grads` to `hyper.clip_norm` and applies one bias-corrected Adam update.
///
/// Parameters and moments are rounded to `f32` afterwards so checkpoints store them exactly.
/// A non-finite gradient leaves everything untouched.
pub fn optimizer_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut AdamState,
    hyper: &AdamHyper,
    lr: f64,
) -> StepOutcome {
    let norm = grads.global_norm();
    if !norm.is_finite() {
        warn!(
            "skipping optimizer step: non-finite gradient in {}",
            grads.first_non_finite(params).unwrap_or("?")
        );
        return StepOutcome {
            applied: false,
            grad_norm: norm,
        };
    }
    let clip = if norm > hyper.clip_norm { hyper.clip_norm / norm } else { 1.0 };
    state.step += 1;
    let bc1 = 1.0 - hyper.beta1.powi(state.step as i32);
    let bc2 = 1.0 - hyper.beta2.powi(state.step as i32);
    for (((_, p), g), (m, v)) in params
        .named_tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for i in 0..p.data.len() {
            let gi = g.data[i] * clip;
            m.data[i] = hyper.beta1 * m.data[i] + (1.0 - hyper.beta1) * gi;
            v.data[i] = hyper.beta2 * v.data[i] + (1.0 - hyper.beta2) * gi * gi;
            let mhat = m.data[i] / bc1;
            let vhat = v.data[i] / bc2;
            p.data[i] -= lr * mhat / (vhat.sqrt() + hyper.eps);
        }
        quantize_f32(&mut p.data);
        quantize_f32(&mut m.data);
        quantize_f32(&mut v.data);
    }
    StepOutcome {
        applied: true,
        grad_norm: norm,
    }
}
