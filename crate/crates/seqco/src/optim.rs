//! Adam with global-norm clipping and a linear warmup/decay schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            peak_lr: 3e-4,
            warmup_steps: 100,
            total_steps: 2000,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config(format!("peak_lr {} must be positive", self.peak_lr)));
        }
        if self.warmup_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "need 0 < warmup_steps ({}) < total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }
}

/// Linear ramp to `peak_lr` at `warmup_steps`, then linear decay to zero at
/// `total_steps`; zero beyond.
pub fn lr_at(step: u64, cfg: &ScheduleConfig) -> f64 {
    if step > cfg.total_steps {
        0.0
    } else if step <= cfg.warmup_steps {
        cfg.peak_lr * (step as f64 / cfg.warmup_steps as f64)
    } else {
        cfg.peak_lr * ((cfg.total_steps - step) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config("invalid Adam settings".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Global norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Moments for every parameter of one store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update from the gradients held in `store`, then clears
    /// them. Parameters without a gradient are left alone. A non-finite
    /// gradient aborts before anything is modified.
    pub fn update(&mut self, store: &mut ParamStore, lr: f64) -> Result<StepStats> {
        if self.m.len() != store.len() {
            return Err(Error::Corruption(format!(
                "optimizer holds {} moments for {} parameters",
                self.m.len(),
                store.len()
            )));
        }
        let mut sq = 0.0;
        for (_, p) in store.iter() {
            if let Some(g) = p.grad.as_ref().filter(|_| p.requires_grad) {
                if !g.all_finite() {
                    return Err(Error::Numerical {
                        step: self.step as usize + 1,
                        reason: format!("non-finite gradient in {}", p.name),
                    });
                }
                sq += g.data().iter().map(|x| x * x).sum::<f64>();
            }
        }
        let grad_norm = sq.sqrt();
        let scale = match self.config.clip_norm {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };

        self.step += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = p.grad.take() else { continue };
            if !p.requires_grad {
                continue;
            }
            let it = p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((w, &g), (m, v)) in it {
                let g = g * scale;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(StepStats {
            grad_norm,
            clipped: scale < 1.0,
        })
    }
}
