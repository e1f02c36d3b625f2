//! Continuous-time consistency distillation, its discrete-time baseline, and
//! the average-velocity target.
//!
//! With `f(x, t) = x − t·F(x, t)` the total derivative of `f` along the teacher
//! flow is `dx/dt − F − t·dF/dt`. The training target replaces the last term's
//! weight by the warmup coefficient `r` and normalizes the result.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{consistency_fn, draw_minibatch, interpolate, Example, Minibatch, TimestepSampler, VelocityField};
use crate::numerics::{AdamWConfig, ParamSet, Tensor, TrainState, VelocityNet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CcdConfig {
    /// Iterations over which `r` ramps from 0 to 1.
    #[serde(default = "default_warmup")]
    pub warmup_iters: u64,
    #[serde(default = "default_mu")]
    pub ema_mu: f64,
    #[serde(default = "default_c")]
    pub norm_c: f64,
    pub lr: f64,
    #[serde(default = "default_sampler")]
    pub sampler: TimestepSampler,
    pub total_iters: u64,
    #[serde(default = "default_batch")]
    pub batch: usize,
}

fn default_warmup() -> u64 {
    1000
}
fn default_mu() -> f64 {
    0.95
}
fn default_c() -> f64 {
    0.1
}
pub(crate) fn default_sampler() -> TimestepSampler {
    TimestepSampler::logit_normal(-0.6, 1.4)
}
fn default_batch() -> usize {
    32
}

impl CcdConfig {
    pub fn new(lr: f64, total_iters: u64) -> Self {
        CcdConfig {
            warmup_iters: default_warmup().min(total_iters),
            ema_mu: default_mu(),
            norm_c: default_c(),
            lr,
            sampler: default_sampler(),
            total_iters,
            batch: default_batch(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.norm_c > 0.0) {
            return Err(Error::invalid(format!("norm_c must be positive, got {}", self.norm_c)));
        }
        if !(0.0..=1.0).contains(&self.ema_mu) {
            return Err(Error::invalid(format!("ema_mu must lie in [0, 1], got {}", self.ema_mu)));
        }
        if self.warmup_iters == 0 || self.warmup_iters > self.total_iters {
            return Err(Error::invalid(format!(
                "warmup_iters must satisfy 0 < warmup_iters <= total_iters ({} vs {})",
                self.warmup_iters, self.total_iters
            )));
        }
        if !(self.lr >= 0.0) || self.batch == 0 {
            return Err(Error::invalid("ccd needs lr >= 0 and batch > 0"));
        }
        self.sampler.validate()
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig::with_lr(self.lr)
    }
}

/// Per-iteration diagnostics. `t` and `raw_tangent_norm` are batch means.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CcdBatchTrace {
    pub iter: u64,
    pub t: f64,
    pub r: f64,
    pub raw_tangent_norm: f64,
    pub loss: f64,
}

pub fn warmup_coefficient(iters: u64, h: u64) -> f64 {
    assert!(h > 0, "warmup length must be positive");
    (iters as f64 / h as f64).min(1.0)
}

/// Tangent target `g = dx/dt − F⁻ − r·t·dF⁻` together with `F⁻(x_t, t)`.
pub fn ccd_tangent_parts(
    teacher: &impl VelocityField,
    student_ema: &VelocityNet,
    x_t: &Tensor,
    t: f64,
    cond: &Tensor,
    r: f64,
) -> Result<(Tensor, Tensor)> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::invalid(format!("warmup coefficient must lie in [0, 1], got {r}")));
    }
    let dxdt = teacher.velocity(x_t, t, cond)?;
    let (f_ema, df) = student_ema.jvp_blockwise(x_t, t, cond, &dxdt, 1.0)?;
    let data = dxdt
        .data()
        .iter()
        .zip(f_ema.data().iter().zip(df.data()))
        .map(|(&v, (&f, &d))| v - f - r * t * d)
        .collect();
    Ok((f_ema, Tensor::new(x_t.shape().to_vec(), data)?))
}

pub fn ccd_tangent(
    teacher: &impl VelocityField,
    student_ema: &VelocityNet,
    x_t: &Tensor,
    t: f64,
    cond: &Tensor,
    r: f64,
) -> Result<Tensor> {
    Ok(ccd_tangent_parts(teacher, student_ema, x_t, t, cond, r)?.1)
}

/// `g / (‖g‖ + c)`.
pub fn tangent_normalize(g: &Tensor, c: f64) -> Result<Tensor> {
    if !(c > 0.0) {
        return Err(Error::invalid(format!("normalization constant must be positive, got {c}")));
    }
    g.scaled(1.0 / (g.norm() + c))
}

/// One regression input for [`ccd_loss`].
#[derive(Clone, Debug)]
pub struct CcdSample {
    pub x_t: Tensor,
    pub t: f64,
    pub cond: Tensor,
    pub g: Tensor,
}

/// Batch mean of `‖pred − target‖²` with `pred = offset + coef·F_θ`.
/// Gradients reach only the parameters of `net`.
pub(crate) fn regress(
    net: &VelocityNet,
    inputs: &[(&Tensor, f64, &Tensor)],
    coef: &[f64],
    offsets: Option<&[Tensor]>,
    targets: &[Tensor],
    grads: &mut ParamSet,
) -> Result<f64> {
    let scale = 1.0 / inputs.len() as f64;
    let mut loss = 0.0;
    for (k, &(x, t, cond)) in inputs.iter().enumerate() {
        let cache = net.forward_cached(x, t, cond)?;
        let target = targets[k].data();
        let mut up = Vec::with_capacity(target.len());
        for (i, &f) in cache.output().iter().enumerate() {
            let off = offsets.map_or(0.0, |o| o[k].data()[i]);
            let resid = off + coef[k] * f - target[i];
            loss += scale * resid * resid;
            up.push(2.0 * scale * coef[k] * resid);
        }
        net.accumulate_backward(&cache, x, cond, &up, grads);
    }
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::NonFinite("regression loss".into()));
    }
    Ok(loss)
}

/// Batch mean of `‖F_θ − F⁻ − g‖²`; `g` and `F⁻` are constants.
pub fn ccd_loss(student: &VelocityNet, student_ema: &VelocityNet, batch: &[CcdSample]) -> Result<(f64, ParamSet)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut targets = Vec::with_capacity(batch.len());
    for s in batch {
        let f_ema = student_ema.forward(&s.x_t, s.t, &s.cond)?;
        targets.push(f_ema.add(&s.g)?);
    }
    let inputs: Vec<_> = batch.iter().map(|s| (&s.x_t, s.t, &s.cond)).collect();
    let mut grads = student.params().zeros_like();
    let loss = regress(student, &inputs, &vec![1.0; batch.len()], None, &targets, &mut grads)?;
    Ok((loss, grads))
}

/// Which regression target drives the student.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Objective {
    /// Normalized continuous tangent with warmup.
    Continuous,
    /// One teacher Euler step of size `delta_t`, then `f⁻` at the earlier time.
    Discrete { delta_t: f64 },
    /// No distillation term; only useful under distribution alignment.
    Adversarial,
}

impl Objective {
    pub fn validate(&self) -> Result<()> {
        if let Objective::Discrete { delta_t } = *self {
            if !(delta_t > 0.0 && delta_t < 1.0 - crate::flow::T_EPS) {
                return Err(Error::invalid(format!("delta_t must lie in (0, 1), got {delta_t}")));
            }
        }
        Ok(())
    }
}

/// Everything one distillation iteration needs before the parameter update.
pub(crate) struct CcdPrepared {
    pub mb: Minibatch,
    pub x_t: Vec<Tensor>,
    pub targets: Vec<Tensor>,
    /// `pred = offset + coef·F_θ`; `None` offsets mean zero.
    pub coef: Vec<f64>,
    pub offsets: Option<Vec<Tensor>>,
    pub r: f64,
    pub raw_norm: f64,
}

pub(crate) fn prepare<R: Rng + ?Sized>(
    objective: Objective,
    teacher: &impl VelocityField,
    state: &TrainState,
    cfg: &CcdConfig,
    data: &[Example],
    rng: &mut R,
) -> Result<CcdPrepared> {
    objective.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("distillation data is empty"));
    }
    let r = warmup_coefficient(state.iters, cfg.warmup_iters);
    let mut mb = draw_minibatch(data, cfg.batch, &cfg.sampler, rng);
    if let Objective::Discrete { delta_t } = objective {
        for t in &mut mb.t {
            while *t <= delta_t {
                *t = cfg.sampler.sample(rng);
            }
        }
    }
    let mut x_t = Vec::with_capacity(cfg.batch);
    let mut targets = Vec::with_capacity(cfg.batch);
    let mut raw_norm = 0.0;
    for ((ex, x1), &t) in mb.examples.iter().zip(&mb.noise).zip(&mb.t) {
        let xt = interpolate(&ex.x0, x1, t)?;
        match objective {
            Objective::Continuous => {
                let (f_ema, g) = ccd_tangent_parts(teacher, &state.theta_ema, &xt, t, &ex.cond, r)?;
                raw_norm += g.norm() / cfg.batch as f64;
                targets.push(f_ema.add(&tangent_normalize(&g, cfg.norm_c)?)?);
            }
            Objective::Discrete { delta_t } => {
                let (prev, t_prev) = teacher_step(teacher, &xt, t, &ex.cond, delta_t)?;
                targets.push(consistency_fn(&state.theta_ema, &prev, t_prev, &ex.cond)?);
            }
            Objective::Adversarial => {}
        }
        x_t.push(xt);
    }
    let (coef, offsets) = match objective {
        Objective::Discrete { .. } => (mb.t.iter().map(|&t| -t).collect(), Some(x_t.clone())),
        _ => (vec![1.0; mb.t.len()], None),
    };
    Ok(CcdPrepared { mb, x_t, targets, coef, offsets, r, raw_norm })
}

impl CcdPrepared {
    pub(crate) fn distill_grads(&self, student: &VelocityNet) -> Result<(f64, ParamSet)> {
        let mut grads = student.params().zeros_like();
        if self.targets.is_empty() {
            return Ok((0.0, grads));
        }
        let inputs: Vec<_> = self
            .x_t
            .iter()
            .zip(&self.mb.t)
            .zip(&self.mb.examples)
            .map(|((x, &t), ex)| (x, t, &ex.cond))
            .collect();
        let loss = regress(student, &inputs, &self.coef, self.offsets.as_deref(), &self.targets, &mut grads)?;
        Ok((loss, grads))
    }

    pub(crate) fn trace(&self, iter: u64, loss: f64) -> CcdBatchTrace {
        CcdBatchTrace {
            iter,
            t: self.mb.t.iter().sum::<f64>() / self.mb.t.len() as f64,
            r: self.r,
            raw_tangent_norm: self.raw_norm,
            loss,
        }
    }
}

/// AdamW on θ, EMA on θ⁻, then advance the counter.
pub(crate) fn apply_update(state: &mut TrainState, grads: &ParamSet, cfg: &CcdConfig) -> Result<()> {
    state.adamw_step(grads, &cfg.optimizer())?;
    state.ema_update(cfg.ema_mu)?;
    state.iters += 1;
    Ok(())
}

pub fn ccd_train_step<R: Rng + ?Sized>(
    teacher: &impl VelocityField,
    state: &mut TrainState,
    cfg: &CcdConfig,
    data: &[Example],
    rng: &mut R,
) -> Result<CcdBatchTrace> {
    let prep = prepare(Objective::Continuous, teacher, state, cfg, data, rng)?;
    let (loss, grads) = prep.distill_grads(&state.theta)?;
    let trace = prep.trace(state.iters, loss);
    apply_update(state, &grads, cfg)?;
    Ok(trace)
}

/// `(f⁻(x_{t−Δt}, t−Δt) − f⁻(x_t, t)) / Δt` with `x_{t−Δt}` one teacher Euler step
/// back. Tends to `−g(r = 1)` as `Δt → 0`.
pub fn discrete_tangent(
    teacher: &impl VelocityField,
    student_ema: &VelocityNet,
    x_t: &Tensor,
    t: f64,
    cond: &Tensor,
    delta_t: f64,
) -> Result<Tensor> {
    let (prev, t_prev) = teacher_step(teacher, x_t, t, cond, delta_t)?;
    let a = consistency_fn(student_ema, &prev, t_prev, cond)?;
    let b = consistency_fn(student_ema, x_t, t, cond)?;
    a.sub(&b)?.scaled(1.0 / delta_t)
}

fn teacher_step(teacher: &impl VelocityField, x_t: &Tensor, t: f64, cond: &Tensor, delta_t: f64) -> Result<(Tensor, f64)> {
    if !(delta_t > 0.0 && delta_t <= t) {
        return Err(Error::invalid(format!("need 0 < delta_t <= t, got delta_t = {delta_t}, t = {t}")));
    }
    let mut prev = x_t.clone();
    prev.axpy(-delta_t, &teacher.velocity(x_t, t, cond)?)?;
    Ok((prev, t - delta_t))
}

/// Discrete-time objective `‖f_θ(x_t, t) − f⁻(x_{t−Δt}, t−Δt)‖²` with unit weight.
pub fn dcd_train_step<R: Rng + ?Sized>(
    teacher: &impl VelocityField,
    state: &mut TrainState,
    cfg: &CcdConfig,
    data: &[Example],
    rng: &mut R,
    delta_t: f64,
) -> Result<f64> {
    let prep = prepare(Objective::Discrete { delta_t }, teacher, state, cfg, data, rng)?;
    let (loss, grads) = prep.distill_grads(&state.theta)?;
    apply_update(state, &grads, cfg)?;
    Ok(loss)
}

/// `dx/dt − t·dF_θ/dt`, the average-velocity identity target with `F_θ` as the
/// average velocity.
pub fn meanflow_identity_target(
    teacher: &impl VelocityField,
    student: &VelocityNet,
    x_t: &Tensor,
    t: f64,
    cond: &Tensor,
) -> Result<Tensor> {
    let dxdt = teacher.velocity(x_t, t, cond)?;
    let (_, df) = student.jvp_blockwise(x_t, t, cond, &dxdt, 1.0)?;
    let data = dxdt.data().iter().zip(df.data()).map(|(&v, &d)| v - t * d).collect();
    Tensor::new(x_t.shape().to_vec(), data)
}
