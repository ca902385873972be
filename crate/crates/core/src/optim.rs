//! Minibatch SGD, Adam with coupled L2 weight decay, and the warmup-then-halving
//! learning-rate schedule.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

fn check_grad(name: &str, g: &[f64]) -> Result<()> {
    if g.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite gradient for {name}")))
    }
}

fn check_lr(lr: f64) -> Result<()> {
    if lr > 0.0 && lr.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "learning rate must be positive, got {lr}"
        )))
    }
}

/// `θ ← θ − lr·∇θ` for every parameter holding a gradient.
pub fn sgd_step(store: &mut ParamStore, lr: f64) -> Result<()> {
    check_lr(lr)?;
    for (_, name, t) in store.iter() {
        if let Some(g) = &t.grad {
            check_grad(name, g)?;
        }
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let t = store.get_mut(id);
        if let Some(g) = t.grad.take() {
            for (p, gv) in t.data_mut().iter_mut().zip(&g) {
                *p -= lr * gv;
            }
            t.grad = Some(g);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.997,
            eps: 1e-9,
            weight_decay: 1e-5,
        }
    }
}

/// Adam moments for every parameter of a store, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.shape()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected update; weight decay is added to the gradient.
    /// Parameters without a gradient are treated as having a zero one.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        check_lr(lr)?;
        if self.m.len() != store.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for (_, name, t) in store.iter() {
            if let Some(g) = &t.grad {
                check_grad(name, g)?;
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let t = store.get_mut(id);
            let grad = t.grad.take();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                let g = grad.as_ref().map_or(0.0, |g| g[j]) + c.weight_decay * *p;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *p -= lr * mh / (vh.sqrt() + c.eps);
            }
            t.grad = grad;
        }
        Ok(())
    }
}

/// Linear warmup over the first `warmup_epochs`, then halving every `period` epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub start: f64,
    pub end: f64,
    pub warmup_epochs: f64,
    pub period: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            start: 1e-5,
            end: 1e-3,
            warmup_epochs: 1.0,
            period: 2.0,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.start > 0.0 && self.start <= self.end) {
            return Err(Error::Config(format!(
                "warmup must rise from a positive start: {} -> {}",
                self.start, self.end
            )));
        }
        if self.period < 1.0 || self.warmup_epochs < 0.0 {
            return Err(Error::Config(
                "halving period must be at least one epoch".into(),
            ));
        }
        Ok(())
    }
}

/// Learning rate at a (fractional) epoch.
pub fn schedule_lr(cfg: &ScheduleConfig, epoch: f64) -> f64 {
    let epoch = epoch.max(0.0);
    if epoch < cfg.warmup_epochs {
        cfg.start + (cfg.end - cfg.start) * epoch / cfg.warmup_epochs
    } else {
        cfg.end * 0.5f64.powi(((epoch - cfg.warmup_epochs) / cfg.period).floor() as i32)
    }
}
