//! Adversarial alignment of the one-step prediction `x̂0 = x_t − t·F_θ` with real
//! data, scored by light discriminator heads over frozen per-frame features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ccd::{apply_update, prepare, CcdConfig, Objective};
use crate::error::{Error, Result};
use crate::flow::{consistency_fn, Example, VelocityField};
use crate::numerics::layers::{Mlp2, Mlp2Cache};
use crate::numerics::{AdamW, AdamWConfig, ParamSet, Tensor, TrainState, VelocityNet};

/// Frozen random 2-layer map from a frame `[D]` to features `[K]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNet {
    params: ParamSet,
    mlp: Mlp2,
}

impl FeatureNet {
    pub const DEFAULT_FEATURES: usize = 32;

    pub fn new<R: Rng + ?Sized>(dim: usize, features: usize, rng: &mut R) -> Result<Self> {
        if dim == 0 || features == 0 {
            return Err(Error::invalid("feature net dimensions must be positive"));
        }
        let mut params = ParamSet::new();
        let mlp = Mlp2::register(&mut params, "features", (dim, features, features), false, rng);
        Ok(FeatureNet { params, mlp })
    }

    pub fn from_params(params: ParamSet) -> Result<Self> {
        if params.len() != 4 {
            return Err(Error::Checkpoint(format!("feature net needs 4 tensors, found {}", params.len())));
        }
        let (hidden, input) = (params.get(0).shape()[0], params.get(0).shape()[1]);
        let output = params.get(2).shape()[0];
        Ok(FeatureNet { params, mlp: Mlp2 { base: 0, input, hidden, output } })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.mlp.input
    }

    pub fn features(&self) -> usize {
        self.mlp.output
    }

    fn forward(&self, frame: &[f64]) -> Mlp2Cache {
        self.mlp.forward(&self.params, frame)
    }

    /// Features of one frame.
    pub fn embed(&self, frame: &[f64]) -> Vec<f64> {
        self.forward(frame).out
    }

    /// Per-frame features of a flattened `[F, D]` sample, concatenated.
    pub fn embed_frames(&self, sample: &[f64]) -> Vec<f64> {
        sample.chunks_exact(self.dim()).flat_map(|f| self.embed(f)).collect()
    }

    /// FNV-1a over the parameter bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.params.tensors() {
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// Spatial heads score `[φ(frame_i); φ(cond)]` for every frame; temporal heads score
/// `[φ(frame_i); φ(frame_{i+1}); φ(cond)]` for every adjacent pair. Each kind shares
/// its weights across positions.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorHeads {
    params: ParamSet,
    spatial: Mlp2,
    temporal: Mlp2,
    frames: usize,
    pub adamw: AdamW,
}

struct HeadsCache {
    frame_feats: Vec<Mlp2Cache>,
    spatial_in: Vec<Vec<f64>>,
    spatial: Vec<Mlp2Cache>,
    temporal_in: Vec<Vec<f64>>,
    temporal: Vec<Mlp2Cache>,
}

impl HeadsCache {
    fn logits(&self) -> Vec<f64> {
        self.spatial.iter().chain(&self.temporal).map(|c| c.out[0]).collect()
    }
}

impl DiscriminatorHeads {
    pub fn new<R: Rng + ?Sized>(frames: usize, features: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        if frames < 2 {
            return Err(Error::invalid(format!("temporal heads need at least 2 frames, got {frames}")));
        }
        let mut params = ParamSet::new();
        let spatial = Mlp2::register(&mut params, "spatial", (2 * features, hidden, 1), false, rng);
        let temporal = Mlp2::register(&mut params, "temporal", (3 * features, hidden, 1), false, rng);
        let adamw = AdamW::new(&params);
        Ok(DiscriminatorHeads { params, spatial, temporal, frames, adamw })
    }

    pub fn from_params(frames: usize, params: ParamSet, adamw: AdamW) -> Result<Self> {
        if frames < 2 || params.len() != 8 {
            return Err(Error::Checkpoint("discriminator heads need 8 tensors and at least 2 frames".into()));
        }
        let mlp = |base: usize| Mlp2 {
            base,
            input: params.get(base).shape()[1],
            hidden: params.get(base).shape()[0],
            output: 1,
        };
        let (spatial, temporal) = (mlp(0), mlp(4));
        params.check_layout(&adamw.m, "discriminator optimizer state")?;
        Ok(DiscriminatorHeads { params, spatial, temporal, frames, adamw })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// `F` spatial logits followed by `F − 1` temporal logits.
    pub fn num_logits(&self) -> usize {
        2 * self.frames - 1
    }

    fn check(&self, fnet: &FeatureNet, sample: &Tensor, cond: &Tensor) -> Result<()> {
        let d = fnet.dim();
        if sample.len() != self.frames * d {
            return Err(Error::shape("discriminator sample", &[self.frames, d], sample.shape()));
        }
        if cond.len() != d {
            return Err(Error::shape("discriminator cond", &[d], cond.shape()));
        }
        if 2 * fnet.features() != self.spatial.input {
            return Err(Error::invalid("feature width does not match discriminator heads"));
        }
        Ok(())
    }

    fn forward(&self, fnet: &FeatureNet, sample: &Tensor, cond: &Tensor) -> Result<HeadsCache> {
        self.check(fnet, sample, cond)?;
        let frame_feats: Vec<Mlp2Cache> = sample.data().chunks_exact(fnet.dim()).map(|f| fnet.forward(f)).collect();
        let cond_feat = fnet.embed(cond.data());
        let spatial_in: Vec<Vec<f64>> = frame_feats.iter().map(|f| [f.out.as_slice(), &cond_feat].concat()).collect();
        let temporal_in: Vec<Vec<f64>> = frame_feats
            .windows(2)
            .map(|w| [w[0].out.as_slice(), &w[1].out, &cond_feat].concat())
            .collect();
        let spatial = spatial_in.iter().map(|x| self.spatial.forward(&self.params, x)).collect();
        let temporal = temporal_in.iter().map(|x| self.temporal.forward(&self.params, x)).collect();
        Ok(HeadsCache { frame_feats, spatial_in, spatial, temporal_in, temporal })
    }

    /// Backpropagates `d_logits` into head parameters (when `grads` is given) and,
    /// when `want_input` is set, into the sample. The condition is treated as constant.
    fn backward(
        &self,
        fnet: &FeatureNet,
        sample: &Tensor,
        cache: &HeadsCache,
        d_logits: &[f64],
        mut grads: Option<&mut ParamSet>,
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let k = fnet.features();
        let f = self.frames;
        let mut d_feat = vec![vec![0.0; k]; f];
        for i in 0..f {
            let dx = self.spatial.backward(&self.params, &cache.spatial_in[i], &cache.spatial[i], &d_logits[i..=i], grads.as_deref_mut());
            if want_input {
                for (a, &b) in d_feat[i].iter_mut().zip(&dx[..k]) {
                    *a += b;
                }
            }
        }
        for i in 0..f - 1 {
            let up = &d_logits[f + i..=f + i];
            let dx = self.temporal.backward(&self.params, &cache.temporal_in[i], &cache.temporal[i], up, grads.as_deref_mut());
            if want_input {
                for j in 0..k {
                    d_feat[i][j] += dx[j];
                    d_feat[i + 1][j] += dx[k + j];
                }
            }
        }
        if !want_input {
            return None;
        }
        let d = fnet.dim();
        let mut d_sample = Vec::with_capacity(f * d);
        for (i, frame) in sample.data().chunks_exact(d).enumerate() {
            d_sample.extend(fnet.mlp.backward(&fnet.params, frame, &cache.frame_feats[i], &d_feat[i], None));
        }
        Some(d_sample)
    }
}

/// One logit per head: spatial heads first, then temporal heads.
pub fn disc_logits(heads: &DiscriminatorHeads, fnet: &FeatureNet, sample: &Tensor, cond: &Tensor) -> Result<Vec<f64>> {
    Ok(heads.forward(fnet, sample, cond)?.logits())
}

/// A logit with the hinge derivative of the loss that consumes it.
fn hinge(margin_violation: f64) -> (f64, f64) {
    if margin_violation > 0.0 {
        (margin_violation, 1.0)
    } else {
        (0.0, 0.0)
    }
}

pub fn d_loss_from_logits(real: &[f64], fake: &[f64]) -> f64 {
    real.iter().map(|&d| hinge(1.0 - d).0).sum::<f64>() + fake.iter().map(|&d| hinge(1.0 + d).0).sum::<f64>()
}

pub fn g_adv_loss_from_logits(fake: &[f64]) -> f64 {
    fake.iter().map(|&d| hinge(1.0 - d).0).sum()
}

/// Batch mean of `Σ_k max(0, 1 − D_k(real)) + max(0, 1 + D_k(fake))` with head gradients.
pub fn d_loss(
    heads: &DiscriminatorHeads,
    fnet: &FeatureNet,
    real: &[Tensor],
    fake: &[Tensor],
    cond: &[Tensor],
) -> Result<(f64, ParamSet)> {
    if real.is_empty() || real.len() != fake.len() || real.len() != cond.len() {
        return Err(Error::invalid("discriminator batch must be non-empty with matching real, fake and cond"));
    }
    let scale = 1.0 / real.len() as f64;
    let mut grads = heads.params.zeros_like();
    let mut loss = 0.0;
    for ((r, fk), c) in real.iter().zip(fake).zip(cond) {
        for (sample, sign) in [(r, 1.0), (fk, -1.0)] {
            let cache = heads.forward(fnet, sample, c)?;
            // real: max(0, 1 − D); fake: max(0, 1 + D)
            let d: Vec<f64> = cache
                .logits()
                .iter()
                .map(|&z| {
                    let (l, active) = hinge(1.0 - sign * z);
                    loss += scale * l;
                    -sign * active * scale
                })
                .collect();
            heads.backward(fnet, sample, &cache, &d, Some(&mut grads), false);
        }
    }
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::NonFinite("discriminator loss".into()));
    }
    Ok((loss, grads))
}

/// `Σ_k max(0, 1 − D_k(fake))` and its gradient with respect to `fake`.
pub fn g_adv_loss(heads: &DiscriminatorHeads, fnet: &FeatureNet, fake: &Tensor, cond: &Tensor) -> Result<(f64, Tensor)> {
    let cache = heads.forward(fnet, fake, cond)?;
    let mut loss = 0.0;
    let d: Vec<f64> = cache
        .logits()
        .iter()
        .map(|&z| {
            let (l, active) = hinge(1.0 - z);
            loss += l;
            -active
        })
        .collect();
    let dx = heads.backward(fnet, fake, &cache, &d, None, true).expect("input gradient requested");
    Ok((loss, Tensor::new(fake.shape().to_vec(), dx)?))
}

/// Same definition as [`consistency_fn`].
pub fn predict_x0_hat(student: &impl VelocityField, x_t: &Tensor, t: f64, cond: &Tensor) -> Result<Tensor> {
    consistency_fn(student, x_t, t, cond)
}

/// Batch mean of the generator hinge on `x̂0 = x_t − t·F_θ`, with gradients into θ.
pub fn g_adv_loss_student(
    student: &VelocityNet,
    heads: &DiscriminatorHeads,
    fnet: &FeatureNet,
    inputs: &[(&Tensor, f64, &Tensor)],
) -> Result<(f64, ParamSet)> {
    if inputs.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let scale = 1.0 / inputs.len() as f64;
    let mut grads = student.params().zeros_like();
    let mut loss = 0.0;
    for &(x_t, t, cond) in inputs {
        let cache = student.forward_cached(x_t, t, cond)?;
        let x0_hat: Vec<f64> = x_t.data().iter().zip(cache.output()).map(|(&x, &f)| x - t * f).collect();
        let x0_hat = Tensor::new(x_t.shape().to_vec(), x0_hat)?;
        let (l, dx) = g_adv_loss(heads, fnet, &x0_hat, cond)?;
        loss += scale * l;
        let up: Vec<f64> = dx.data().iter().map(|&g| -t * scale * g).collect();
        student.accumulate_backward(&cache, x_t, cond, &up, &mut grads);
    }
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::NonFinite("generator adversarial loss".into()));
    }
    Ok((loss, grads))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DaConfig {
    #[serde(default = "default_lambda")]
    pub lambda_adv: f64,
    #[serde(default = "default_warmup")]
    pub n_warmup: u64,
    pub disc_lr: f64,
    #[serde(default = "default_hidden")]
    pub disc_hidden: usize,
}

fn default_lambda() -> f64 {
    0.01
}
fn default_warmup() -> u64 {
    1000
}
fn default_hidden() -> usize {
    32
}

impl DaConfig {
    pub fn new(disc_lr: f64) -> Self {
        DaConfig { lambda_adv: default_lambda(), n_warmup: default_warmup(), disc_lr, disc_hidden: default_hidden() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_adv > 0.0) || !(self.disc_lr > 0.0) || self.disc_hidden == 0 {
            return Err(Error::invalid(format!("distribution alignment needs lambda_adv > 0 and disc_lr > 0, got {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DaTrace {
    pub iter: u64,
    pub d_loss: f64,
    pub g_adv_loss: f64,
    pub distill_loss: f64,
    pub active: bool,
}

/// One discriminator update then one generator update on `λ_adv·adv + distill`.
/// Before `n_warmup` iterations this is exactly a CCD step.
#[allow(clippy::too_many_arguments)]
pub fn da_train_step<R: Rng + ?Sized>(
    teacher: &impl VelocityField,
    state: &mut TrainState,
    heads: &mut DiscriminatorHeads,
    fnet: &FeatureNet,
    ccd_cfg: &CcdConfig,
    da_cfg: &DaConfig,
    data: &[Example],
    rng: &mut R,
) -> Result<DaTrace> {
    da_train_step_with(Objective::Continuous, teacher, state, heads, fnet, ccd_cfg, da_cfg, data, rng)
}

/// [`da_train_step`] with an arbitrary distillation term.
#[allow(clippy::too_many_arguments)]
pub fn da_train_step_with<R: Rng + ?Sized>(
    objective: Objective,
    teacher: &impl VelocityField,
    state: &mut TrainState,
    heads: &mut DiscriminatorHeads,
    fnet: &FeatureNet,
    ccd_cfg: &CcdConfig,
    da_cfg: &DaConfig,
    data: &[Example],
    rng: &mut R,
) -> Result<DaTrace> {
    let prep = prepare(objective, teacher, state, ccd_cfg, data, rng)?;
    let (distill_loss, mut grads) = prep.distill_grads(&state.theta)?;
    let iter = state.iters;
    let active = iter >= da_cfg.n_warmup;
    let (mut dl, mut gl) = (0.0, 0.0);
    if active {
        let conds: Vec<Tensor> = prep.mb.examples.iter().map(|e| e.cond.clone()).collect();
        let real: Vec<Tensor> = prep.mb.examples.iter().map(|e| e.x0.clone()).collect();
        let fake = prep
            .x_t
            .iter()
            .zip(&prep.mb.t)
            .zip(&conds)
            .map(|((x, &t), c)| predict_x0_hat(&state.theta, x, t, c))
            .collect::<Result<Vec<_>>>()?;
        let (loss, head_grads) = d_loss(heads, fnet, &real, &fake, &conds)?;
        heads.adamw.step(&mut heads.params, &head_grads, &AdamWConfig::with_lr(da_cfg.disc_lr))?;
        dl = loss;

        let inputs: Vec<_> = prep.x_t.iter().zip(&prep.mb.t).zip(&conds).map(|((x, &t), c)| (x, t, c)).collect();
        let (loss, adv_grads) = g_adv_loss_student(&state.theta, heads, fnet, &inputs)?;
        grads.add_scaled(da_cfg.lambda_adv, &adv_grads);
        gl = loss;
    }
    apply_update(state, &grads, ccd_cfg)?;
    Ok(DaTrace { iter, d_loss: dl, g_adv_loss: gl, distill_loss, active })
}
