//! Decoupled-weight-decay Adam, the EMA shadow, and the state they act on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamSet, VelocityNet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamWConfig {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
        }
    }
}

/// First/second moments and the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub m: ParamSet,
    pub v: ParamSet,
    pub step: u64,
}

impl AdamW {
    pub fn new(like: &ParamSet) -> Self {
        AdamW {
            m: like.zeros_like(),
            v: like.zeros_like(),
            step: 0,
        }
    }

    /// One AdamW update of `params`. A non-finite gradient is rejected before
    /// anything is modified.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, cfg: &AdamWConfig) -> Result<()> {
        params.check_layout(grads, "adamw gradients")?;
        params.check_layout(&self.m, "adamw moments")?;
        if !grads.is_finite() {
            return Err(Error::NonFinite("adamw gradient".into()));
        }
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        let decay = 1.0 - cfg.lr * cfg.weight_decay;
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p = *p * decay - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// `shadow ← μ·shadow + (1−μ)·params`, elementwise.
pub fn ema_update(shadow: &mut ParamSet, params: &ParamSet, mu: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::invalid(format!("ema rate must lie in [0, 1], got {mu}")));
    }
    shadow.check_layout(params, "ema shadow")?;
    for (s, p) in shadow.tensors_mut().iter_mut().zip(params.tensors()) {
        for (s, &p) in s.data_mut().iter_mut().zip(p.data()) {
            *s = mu * *s + (1.0 - mu) * p;
        }
    }
    Ok(())
}

/// Student parameters, their EMA shadow, optimizer state and iteration count.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub theta: VelocityNet,
    pub theta_ema: VelocityNet,
    pub adamw: AdamW,
    pub iters: u64,
}

impl TrainState {
    /// Fresh state whose shadow equals `net`.
    pub fn new(net: VelocityNet) -> Self {
        TrainState {
            adamw: AdamW::new(net.params()),
            theta_ema: net.clone(),
            theta: net,
            iters: 0,
        }
    }

    pub fn adamw_step(&mut self, grads: &ParamSet, cfg: &AdamWConfig) -> Result<()> {
        self.adamw.step(self.theta.params_mut(), grads, cfg)
    }

    pub fn ema_update(&mut self, mu: f64) -> Result<()> {
        ema_update(self.theta_ema.params_mut(), self.theta.params(), mu)
    }
}
