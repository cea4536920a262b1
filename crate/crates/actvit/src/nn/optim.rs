//! AdamW with decoupled weight decay, and the warmup + cosine-decay
//! learning-rate schedule used by every training protocol.

use super::{Param, Real};

/// Fraction of total steps spent in linear warmup.
pub const WARMUP_FRACTION: f64 = 0.10;

/// Linear warmup to the peak over the first 10% of steps, then cosine decay
/// to zero. `lr(0) == 0` and `lr(warmup_steps) == peak` exactly.
#[derive(Debug, Clone, Copy)]
pub struct WarmupCosine {
    pub peak: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl WarmupCosine {
    pub fn new(peak: f64, total_steps: usize) -> Self {
        let warmup_steps = ((total_steps as f64 * WARMUP_FRACTION).round() as usize).max(1);
        WarmupCosine {
            peak,
            total_steps,
            warmup_steps,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return 0.0;
        }
        if step <= self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        if step >= self.total_steps {
            return 0.0;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        self.peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Anything exposing named parameters in a stable order. The `trainable`
/// flag reflects the owner's freeze state; frozen parameters are skipped by
/// the optimizer and so stay bit-identical across steps.
pub trait ParamSource<R: Real> {
    fn visit_params(&mut self, f: &mut dyn FnMut(String, &mut Param<R>, bool));
}

struct Slot<R: Real> {
    name: String,
    m: Vec<R>,
    v: Vec<R>,
}

/// AdamW; moments are kept per parameter tensor, keyed by visit order.
pub struct AdamW<R: Real> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step_count: u32,
    slots: Vec<Slot<R>>,
}

impl<R: Real> Default for AdamW<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> AdamW<R> {
    pub fn new() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            slots: Vec::new(),
        }
    }

    /// One optimizer step over all trainable parameters.
    pub fn step<M: ParamSource<R>>(&mut self, model: &mut M, lr: f64, weight_decay: f64) {
        self.step_count += 1;
        let t = self.step_count;
        let bias1 = 1.0 - self.beta1.powi(t as i32);
        let bias2 = 1.0 - self.beta2.powi(t as i32);
        let b1 = R::from_f64(self.beta1);
        let b2 = R::from_f64(self.beta2);
        let one_m_b1 = R::from_f64(1.0 - self.beta1);
        let one_m_b2 = R::from_f64(1.0 - self.beta2);
        let eps = R::from_f64(self.eps);
        let lr_r = R::from_f64(lr);
        let decay = R::from_f64(lr * weight_decay);
        let inv_bias1 = R::from_f64(1.0 / bias1);
        let inv_bias2 = R::from_f64(1.0 / bias2);

        let slots = &mut self.slots;
        let mut idx = 0usize;
        model.visit_params(&mut |name, param, trainable| {
            if idx == slots.len() {
                slots.push(Slot {
                    name: name.clone(),
                    m: vec![R::ZERO; param.value.data.len()],
                    v: vec![R::ZERO; param.value.data.len()],
                });
            }
            let slot = &mut slots[idx];
            assert_eq!(slot.name, name, "parameter visit order changed");
            idx += 1;
            if !trainable {
                return;
            }
            for i in 0..param.value.data.len() {
                let g = param.grad.data[i];
                let theta = param.value.data[i];
                // Decoupled decay.
                let theta = theta - decay * theta;
                slot.m[i] = b1 * slot.m[i] + one_m_b1 * g;
                slot.v[i] = b2 * slot.v[i] + one_m_b2 * g * g;
                let m_hat = slot.m[i] * inv_bias1;
                let v_hat = slot.v[i] * inv_bias2;
                param.value.data[i] = theta - lr_r * m_hat / (v_hat.sqrt() + eps);
            }
        });
    }
}

/// Zero all gradient accumulators.
pub fn zero_grads<R: Real, M: ParamSource<R>>(model: &mut M) {
    model.visit_params(&mut |_, p, _| p.zero_grad());
}

/// Zero the gradients of frozen parameters so they contribute neither to
/// clipping nor to any downstream inspection.
pub fn zero_frozen_grads<R: Real, M: ParamSource<R>>(model: &mut M) {
    model.visit_params(&mut |_, p, trainable| {
        if !trainable {
            p.zero_grad();
        }
    });
}

/// Global L2 norm of all trainable gradients.
pub fn trainable_grad_norm<R: Real, M: ParamSource<R>>(model: &mut M) -> f64 {
    let mut sq = 0.0f64;
    model.visit_params(&mut |_, p, trainable| {
        if trainable {
            for g in &p.grad.data {
                let g = g.to_f64();
                sq += g * g;
            }
        }
    });
    sq.sqrt()
}

/// Scale trainable gradients so their global norm is at most `max_norm`.
pub fn clip_grad_norm<R: Real, M: ParamSource<R>>(model: &mut M, max_norm: f64) -> f64 {
    let norm = trainable_grad_norm(model);
    if norm > max_norm && norm > 0.0 {
        let scale = R::from_f64(max_norm / norm);
        model.visit_params(&mut |_, p, trainable| {
            if trainable {
                for g in p.grad.data.iter_mut() {
                    *g *= scale;
                }
            }
        });
    }
    norm
}
