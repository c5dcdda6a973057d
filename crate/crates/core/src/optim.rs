//! LARS (pre-training), Adam (evaluation) and the warmup + cosine schedule.

use std::collections::BTreeMap;

use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{CapcError, Result};
use crate::model::{Module, ParamKind};
use crate::scalar::Scalar;

/// Linear warmup from 0 to `base_lr` over `warmup_steps`, then a half-cosine
/// decay reaching 0 at step `total_steps - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, warmup_steps: usize, total_steps: usize) -> Self {
        Self {
            base_lr,
            warmup_steps,
            total_steps,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self
            .total_steps
            .saturating_sub(1)
            .saturating_sub(self.warmup_steps)
            .max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LarsConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Scales the layer-wise trust ratio.
    pub trust_coefficient: f64,
    pub eps: f64,
}

impl Default for LarsConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 1.5e-6,
            trust_coefficient: 0.001,
            eps: 1e-8,
        }
    }
}

/// `eta * |w| / (|g| + wd * |w| + eps)`, or 1 when either norm vanishes.
pub fn trust_ratio(w_norm: f64, g_norm: f64, config: &LarsConfig) -> f64 {
    if w_norm > 0.0 && g_norm > 0.0 {
        config.trust_coefficient * w_norm / (g_norm + config.weight_decay * w_norm + config.eps)
    } else {
        1.0
    }
}

fn norm<F: Scalar>(x: &ArrayD<F>) -> f64 {
    x.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt()
}

/// Error naming the first trainable parameter with a non-finite gradient.
fn check_finite<F: Scalar>(module: &impl Module<F>, step: usize) -> Result<()> {
    let mut bad = None;
    module.visit("", &mut |name, p| {
        if bad.is_none() && p.kind.is_trainable() && !p.grad.iter().all(|v| v.is_finite()) {
            bad = Some(name.to_string());
        }
    });
    match bad {
        None => Ok(()),
        Some(param) => Err(CapcError::NonFinite { param, step }),
    }
}

/// One LARS update of a single parameter tensor.
///
/// Weights: `v <- m v + lr * trust * (g + wd w)`, `w <- w - v`.
/// Biases and normalization parameters: `v <- m v + lr_bias_bn * g`, no
/// weight decay and no trust scaling.
pub fn lars_step<F: Scalar>(
    value: &mut ArrayD<F>,
    grad: &ArrayD<F>,
    velocity: &mut ArrayD<F>,
    kind: ParamKind,
    lr: f64,
    lr_bias_bn: f64,
    config: &LarsConfig,
) {
    let m = F::lit(config.momentum);
    let (scale, wd) = match kind {
        ParamKind::Weight => (
            lr * trust_ratio(norm(value), norm(grad), config),
            config.weight_decay,
        ),
        ParamKind::Bias | ParamKind::Norm => (lr_bias_bn, 0.0),
        ParamKind::Buffer => return,
    };
    let scale = F::lit(scale);
    let wd = F::lit(wd);
    Zip::from(value)
        .and(grad)
        .and(velocity)
        .for_each(|w, &g, v| {
            *v = m * *v + scale * (g + wd * *w);
            *w -= *v;
        });
}

/// LARS with per-parameter momentum buffers keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Lars<F> {
    pub config: LarsConfig,
    pub velocity: BTreeMap<String, ArrayD<F>>,
}

impl<F: Scalar> Lars<F> {
    pub fn new(config: LarsConfig) -> Self {
        Self {
            config,
            velocity: BTreeMap::new(),
        }
    }

    /// Applies one update to every trainable parameter of `module` using the
    /// accumulated gradients. Fails without touching any parameter when a
    /// gradient is non-finite.
    pub fn step(
        &mut self,
        module: &mut impl Module<F>,
        lr: f64,
        lr_bias_bn: f64,
        step: usize,
    ) -> Result<()> {
        check_finite(module, step)?;
        let config = self.config;
        let velocity = &mut self.velocity;
        module.visit_mut("", &mut |name, p| {
            if !p.kind.is_trainable() {
                return;
            }
            let v = velocity
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
            lars_step(&mut p.value, &p.grad, v, p.kind, lr, lr_bias_bn, &config);
        });
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub config: AdamConfig,
    t: u32,
    moments: BTreeMap<String, (ArrayD<F>, ArrayD<F>)>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }

    /// Bias-corrected Adam update of every trainable parameter of `module`.
    pub fn step(&mut self, module: &mut impl Module<F>, lr: f64) -> Result<()> {
        check_finite(module, self.t as usize)?;
        self.t += 1;
        let t = self.t as i32;
        let c = self.config;
        let b1 = F::lit(c.beta1);
        let b2 = F::lit(c.beta2);
        let step_size = F::lit(lr / (1.0 - c.beta1.powi(t)));
        let bc2 = F::lit(1.0 - c.beta2.powi(t));
        let eps = F::lit(c.eps);
        let moments = &mut self.moments;
        module.visit_mut("", &mut |name, p| {
            if !p.kind.is_trainable() {
                return;
            }
            let (m, v) = moments.entry(name.to_string()).or_insert_with(|| {
                (
                    ArrayD::zeros(p.value.raw_dim()),
                    ArrayD::zeros(p.value.raw_dim()),
                )
            });
            Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (F::one() - b1) * g;
                    *v = b2 * *v + (F::one() - b2) * g * g;
                    *w -= step_size * *m / ((*v / bc2).sqrt() + eps);
                });
        });
        Ok(())
    }
}
