//! Preference optimization on self-generated pairs: the many-step sample is
//! preferred over the few-step sample from the same noise, and a reflow term
//! anchors the preferred velocity.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{euler_sample, interpolate, EulerSchedule, TimestepSampler, VelocityField};
use crate::numerics::layers::{sigmoid, softplus};
use crate::numerics::{AdamW, AdamWConfig, Checkpoint, ParamSet, Tensor, VelocityNet};
use crate::rng;

const NOISE_LABEL: &str = "preference-noise";

#[derive(Clone, Debug, PartialEq)]
pub struct PreferencePair {
    pub cond: Tensor,
    pub x0_w: Tensor,
    pub x0_l: Tensor,
    pub noise_seed: u64,
}

impl PreferencePair {
    /// The initial noise both samples were generated from.
    pub fn noise(&self) -> Tensor {
        rng::normal_tensor(&mut rng::stream(self.noise_seed, NOISE_LABEL), self.x0_w.shape())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaConfig {
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_lambda_rf")]
    pub lambda_rf: f64,
    pub steps_w: usize,
    pub steps_l: usize,
    #[serde(default = "default_size")]
    pub dataset_size: usize,
    pub lr: f64,
    pub iters: u64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "crate::ccd::default_sampler")]
    pub sampler: TimestepSampler,
}

fn default_beta() -> f64 {
    2500.0
}
fn default_lambda_rf() -> f64 {
    2.0
}
fn default_size() -> usize {
    5000
}
fn default_batch() -> usize {
    32
}

impl TaConfig {
    pub fn new(steps_w: usize, steps_l: usize, lr: f64, iters: u64) -> Self {
        TaConfig {
            beta: default_beta(),
            lambda_rf: default_lambda_rf(),
            steps_w,
            steps_l,
            dataset_size: default_size(),
            lr,
            iters,
            batch: default_batch(),
            sampler: crate::ccd::default_sampler(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.steps_w > self.steps_l && self.steps_l >= 1) {
            return Err(Error::invalid(format!(
                "preferred step count must exceed the other: steps_w = {}, steps_l = {}",
                self.steps_w, self.steps_l
            )));
        }
        if !(self.beta > 0.0) || !(self.lambda_rf >= 0.0) || !(self.lr >= 0.0) {
            return Err(Error::invalid("trajectory alignment needs beta > 0, lambda_rf >= 0, lr >= 0"));
        }
        if self.dataset_size == 0 || self.batch == 0 {
            return Err(Error::invalid("dataset_size and batch must be positive"));
        }
        self.sampler.validate()
    }
}

/// Generates `cfg.dataset_size` pairs, cycling through `conds`.
pub fn synthesize_preferences(
    model: &impl VelocityField,
    conds: &[Tensor],
    sample_shape: &[usize],
    cfg: &TaConfig,
    seed: u64,
) -> Result<Vec<PreferencePair>> {
    cfg.validate()?;
    if conds.is_empty() {
        return Err(Error::invalid("no conditions to synthesize preferences from"));
    }
    let sched_w = EulerSchedule::new(cfg.steps_w)?;
    let sched_l = EulerSchedule::new(cfg.steps_l)?;
    (0..cfg.dataset_size)
        .into_par_iter()
        .map(|i| {
            let cond = conds[i % conds.len()].clone();
            let noise_seed: u64 = rng::indexed(seed, "preference-pairs", i as u64).random();
            let mut pair = PreferencePair {
                x0_w: Tensor::zeros(sample_shape),
                x0_l: Tensor::zeros(sample_shape),
                cond,
                noise_seed,
            };
            let x1 = pair.noise();
            pair.x0_w = euler_sample(model, &x1, &pair.cond, &sched_w)?;
            pair.x0_l = euler_sample(model, &x1, &pair.cond, &sched_l)?;
            Ok(pair)
        })
        .collect()
}

pub fn preferences_to_checkpoint(pairs: &[PreferencePair]) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new("preferences");
    let seeds: Vec<u64> = pairs.iter().map(|p| p.noise_seed).collect();
    ck.set_meta("noise_seeds", &seeds)?;
    for (i, p) in pairs.iter().enumerate() {
        ck.push(format!("{i}/cond"), p.cond.clone());
        ck.push(format!("{i}/x0_w"), p.x0_w.clone());
        ck.push(format!("{i}/x0_l"), p.x0_l.clone());
    }
    Ok(ck)
}

pub fn preferences_from_checkpoint(ck: &Checkpoint) -> Result<Vec<PreferencePair>> {
    ck.expect_kind("preferences")?;
    let seeds: Vec<u64> = ck.meta("noise_seeds")?;
    seeds
        .iter()
        .enumerate()
        .map(|(i, &noise_seed)| {
            Ok(PreferencePair {
                cond: ck.get(&format!("{i}/cond"))?.clone(),
                x0_w: ck.get(&format!("{i}/x0_w"))?.clone(),
                x0_l: ck.get(&format!("{i}/x0_l"))?.clone(),
                noise_seed,
            })
        })
        .collect()
}

/// One pair with its shared time and noise.
#[derive(Clone, Copy, Debug)]
pub struct TaSample<'a> {
    pub pair: &'a PreferencePair,
    pub t: f64,
    pub eps: &'a Tensor,
}

/// Loss terms, diagnostics, and the student gradient of the requested objective.
#[derive(Clone, Debug)]
pub struct TaEval {
    pub dpo: f64,
    pub reflow: f64,
    pub win_diff: f64,
    pub loss: f64,
    pub grads: ParamSet,
}

struct Side {
    x_t: Tensor,
    v: Tensor,
}

impl Side {
    fn new(x0: &Tensor, eps: &Tensor, t: f64) -> Result<Self> {
        Ok(Side { x_t: interpolate(x0, eps, t)?, v: eps.sub(x0)? })
    }
}

/// Evaluates `dpo_weight·DPO + rf_weight·reflow` over a batch (batch means).
fn evaluate(
    student: &VelocityNet,
    reference: &VelocityNet,
    batch: &[TaSample<'_>],
    beta: f64,
    dpo_weight: f64,
    rf_weight: f64,
) -> Result<TaEval> {
    if batch.is_empty() {
        return Err(Error::invalid("empty preference batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = student.params().zeros_like();
    let (mut dpo, mut reflow, mut win_diff) = (0.0, 0.0, 0.0);
    for s in batch {
        let cond = &s.pair.cond;
        let w = Side::new(&s.pair.x0_w, s.eps, s.t)?;
        let l = Side::new(&s.pair.x0_l, s.eps, s.t)?;
        let cw = student.forward_cached(&w.x_t, s.t, cond)?;
        let cl = student.forward_cached(&l.x_t, s.t, cond)?;
        let sq_err = |v: &Tensor, f: &[f64]| v.data().iter().zip(f).map(|(&a, &b)| (a - b) * (a - b)).sum::<f64>();
        let e_w = sq_err(&w.v, cw.output());
        let e_l = sq_err(&l.v, cl.output());
        let r_w = sq_err(&w.v, reference.forward(&w.x_t, s.t, cond)?.data());
        let r_l = sq_err(&l.v, reference.forward(&l.x_t, s.t, cond)?.data());
        let x = (e_w - r_w) - (e_l - r_l);
        let z = 0.5 * beta * x;
        dpo += scale * softplus(z);
        reflow += scale * e_w;
        win_diff += scale * (e_w - r_w);

        // ∂/∂e_w and ∂/∂e_l of the weighted objective, then ∂e/∂F = −2(v − F)
        let dz = dpo_weight * scale * 0.5 * beta * sigmoid(z);
        let coef_w = dz + rf_weight * scale;
        let coef_l = -dz;
        for (side, cache, coef) in [(&w, &cw, coef_w), (&l, &cl, coef_l)] {
            if coef == 0.0 {
                continue;
            }
            let up: Vec<f64> = side.v.data().iter().zip(cache.output()).map(|(&v, &f)| -2.0 * coef * (v - f)).collect();
            student.accumulate_backward(cache, &side.x_t, cond, &up, &mut grads);
        }
    }
    let loss = dpo_weight * dpo + rf_weight * reflow;
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::NonFinite("trajectory alignment loss".into()));
    }
    Ok(TaEval { dpo, reflow, win_diff, loss, grads })
}

/// `softplus((β/2)·[(e_θ^w − e_ref^w) − (e_θ^l − e_ref^l)])`, batch mean.
pub fn dpo_loss(student: &VelocityNet, reference: &VelocityNet, batch: &[TaSample<'_>], beta: f64) -> Result<TaEval> {
    evaluate(student, reference, batch, beta, 1.0, 0.0)
}

/// `‖v^w − F_θ(x_t^w, t)‖²`, batch mean.
pub fn reflow_loss(student: &VelocityNet, batch: &[TaSample<'_>]) -> Result<TaEval> {
    evaluate(student, student, batch, 1.0, 0.0, 1.0)
}

pub fn ta_loss(student: &VelocityNet, reference: &VelocityNet, batch: &[TaSample<'_>], cfg: &TaConfig) -> Result<TaEval> {
    evaluate(student, reference, batch, cfg.beta, 1.0, cfg.lambda_rf)
}

/// `e_θ^w − e_ref^w`, batch mean; negative when the student fits preferred data better.
pub fn win_diff(student: &VelocityNet, reference: &VelocityNet, batch: &[TaSample<'_>]) -> Result<f64> {
    Ok(evaluate(student, reference, batch, 1.0, 0.0, 0.0)?.win_diff)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaTrace {
    pub iter: u64,
    pub loss: f64,
    pub dpo: f64,
    pub reflow: f64,
    pub win_diff: f64,
}

/// Full-parameter fine-tune of `student` against the frozen `reference`.
/// Each pair uses its own generating noise as `ε` and one sampled `t` for both sides.
pub fn ta_train_round<R: Rng + ?Sized>(
    student: &mut VelocityNet,
    reference: &VelocityNet,
    prefs: &[PreferencePair],
    cfg: &TaConfig,
    rng: &mut R,
) -> Result<Vec<TaTrace>> {
    cfg.validate()?;
    if prefs.is_empty() {
        return Err(Error::invalid("empty preference dataset"));
    }
    let noise: Vec<Tensor> = prefs.par_iter().map(PreferencePair::noise).collect();
    let mut opt = AdamW::new(student.params());
    let opt_cfg = AdamWConfig::with_lr(cfg.lr);
    let mut trace = Vec::with_capacity(cfg.iters as usize);
    for iter in 0..cfg.iters {
        let batch: Vec<TaSample<'_>> = (0..cfg.batch)
            .map(|_| {
                let i = rng.random_range(0..prefs.len());
                TaSample { pair: &prefs[i], t: cfg.sampler.sample(rng), eps: &noise[i] }
            })
            .collect();
        let ev = ta_loss(student, reference, &batch, cfg)?;
        opt.step(student.params_mut(), &ev.grads, &opt_cfg)?;
        trace.push(TaTrace { iter, loss: ev.loss, dpo: ev.dpo, reflow: ev.reflow, win_diff: ev.win_diff });
    }
    Ok(trace)
}

/// Mean `‖x0_w − x0_l‖` over pairs.
pub fn mean_pair_distance(prefs: &[PreferencePair]) -> Result<f64> {
    let mut total = 0.0;
    for p in prefs {
        total += p.x0_w.sub(&p.x0_l)?.norm();
    }
    Ok(total / prefs.len().max(1) as f64)
}
