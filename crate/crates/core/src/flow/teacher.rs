use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{fm_loss, Example, TimestepSampler};
use crate::numerics::{AdamW, AdamWConfig, Tensor, VelocityNet};
use crate::rng::normal_tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub iters: u64,
    pub lr: f64,
    /// Cosine decay target.
    #[serde(default)]
    pub lr_final: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "TimestepSampler::uniform")]
    pub sampler: TimestepSampler,
}

fn default_batch() -> usize {
    64
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 || self.batch == 0 {
            return Err(Error::invalid("teacher training needs iters > 0 and batch > 0"));
        }
        if !(self.lr > 0.0) || !(self.lr_final >= 0.0) || self.lr_final > self.lr {
            return Err(Error::invalid(format!(
                "teacher learning rates must satisfy 0 <= lr_final <= lr, lr > 0 (got {} and {})",
                self.lr, self.lr_final
            )));
        }
        self.sampler.validate()
    }

    pub fn lr_at(&self, iter: u64) -> f64 {
        let frac = iter as f64 / self.iters as f64;
        self.lr_final + 0.5 * (self.lr - self.lr_final) * (1.0 + (PI * frac).cos())
    }
}

/// A minibatch drawn with replacement plus its noise and times.
pub struct Minibatch {
    pub examples: Vec<Example>,
    pub noise: Vec<Tensor>,
    pub t: Vec<f64>,
}

pub fn draw_minibatch<R: Rng + ?Sized>(
    data: &[Example],
    size: usize,
    sampler: &TimestepSampler,
    rng: &mut R,
) -> Minibatch {
    let mut examples = Vec::with_capacity(size);
    let mut noise = Vec::with_capacity(size);
    let mut t = Vec::with_capacity(size);
    for _ in 0..size {
        let ex = &data[rng.random_range(0..data.len())];
        noise.push(normal_tensor(rng, ex.x0.shape()));
        t.push(sampler.sample(rng));
        examples.push(ex.clone());
    }
    Minibatch { examples, noise, t }
}

/// Trains a velocity network with the flow-matching loss; returns the loss trace.
pub fn train_teacher<R: Rng + ?Sized>(
    net: &mut VelocityNet,
    data: &[Example],
    cfg: &TeacherConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("teacher training set is empty"));
    }
    let mut opt = AdamW::new(net.params());
    let mut trace = Vec::with_capacity(cfg.iters as usize);
    for iter in 0..cfg.iters {
        let mb = draw_minibatch(data, cfg.batch, &cfg.sampler, rng);
        let lg = fm_loss(net, &mb.examples, &mb.noise, &mb.t)?;
        opt.step(net.params_mut(), &lg.grads, &AdamWConfig::with_lr(cfg.lr_at(iter)))?;
        trace.push(lg.loss);
    }
    Ok(trace)
}
