//! The block-structured velocity network `F(x, t, cond)`.
//!
//! ```text
//! temb = T · [sin(ωt), cos(ωt)] + bT          time embedding
//! cemb = C · cond + bC                        condition embedding
//! h    = P · x + bP                           input embedding
//! h    = h + W2 · silu(W1 · (h + temb + cemb) + b1) + b2    per block
//! F    = O · h + bO                           output layer
//! ```
//!
//! Reverse mode is written out by hand; forward mode propagates a
//! [`DualTensor`] through the same stages one block at a time.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::layers::{affine, affine_backward, init_uniform, linear, silu, silu_grad};
use crate::numerics::{DualTensor, ParamSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Flattened sample size `F·D`.
    pub in_dim: usize,
    pub cond_dim: usize,
    pub width: usize,
    pub blocks: usize,
    #[serde(default = "default_time_freqs")]
    pub time_freqs: usize,
    /// Highest angular frequency of the time features; the lowest is 1.
    #[serde(default = "default_max_freq")]
    pub max_freq: f64,
}

fn default_time_freqs() -> usize {
    16
}

fn default_max_freq() -> f64 {
    64.0
}

impl NetConfig {
    pub fn new(in_dim: usize, cond_dim: usize, width: usize, blocks: usize) -> Self {
        NetConfig {
            in_dim,
            cond_dim,
            width,
            blocks,
            time_freqs: default_time_freqs(),
            max_freq: default_max_freq(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks < 2 {
            return Err(Error::invalid(format!("velocity net needs at least 2 blocks, got {}", self.blocks)));
        }
        if self.in_dim == 0 || self.cond_dim == 0 || self.width == 0 || self.time_freqs < 2 || !(self.max_freq >= 1.0) {
            return Err(Error::invalid(format!("degenerate net config {self:?}")));
        }
        Ok(())
    }

    /// Expected (name, shape) of every parameter, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let w = self.width;
        let mut l = vec![
            ("time_embed.weight".to_string(), vec![w, 2 * self.time_freqs]),
            ("time_embed.bias".to_string(), vec![w]),
            ("input_embed.weight".to_string(), vec![w, self.in_dim]),
            ("input_embed.bias".to_string(), vec![w]),
            ("cond_embed.weight".to_string(), vec![w, self.cond_dim]),
            ("cond_embed.bias".to_string(), vec![w]),
        ];
        for i in 0..self.blocks {
            l.push((format!("blocks.{i}.fc1.weight"), vec![w, w]));
            l.push((format!("blocks.{i}.fc1.bias"), vec![w]));
            l.push((format!("blocks.{i}.fc2.weight"), vec![w, w]));
            l.push((format!("blocks.{i}.fc2.bias"), vec![w]));
        }
        l.push(("output.weight".to_string(), vec![self.in_dim, w]));
        l.push(("output.bias".to_string(), vec![self.in_dim]));
        l
    }

    /// Geometric ladder of angular frequencies from 1 to `max_freq`.
    pub fn frequencies(&self) -> Vec<f64> {
        let k = self.time_freqs;
        (0..k).map(|i| self.max_freq.powf(i as f64 / (k - 1) as f64)).collect()
    }
}

const TIME_W: usize = 0;
const TIME_B: usize = 1;
const IN_W: usize = 2;
const IN_B: usize = 3;
const COND_W: usize = 4;
const COND_B: usize = 5;
const BLOCKS: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct VelocityNet {
    config: NetConfig,
    freqs: Vec<f64>,
    params: ParamSet,
}

/// Activations kept by [`VelocityNet::forward_cached`] for the backward pass.
pub struct ForwardCache {
    feats: Vec<f64>,
    mixed: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
    last: Vec<f64>,
    out: Vec<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        &self.out
    }
}

impl VelocityNet {
    /// Fan-in uniform initialization; the output layer starts at zero.
    pub fn new<R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let mut p = ParamSet::new();
        p.push("time_embed.weight", init_uniform(rng, w, 2 * config.time_freqs, 1.0));
        p.push("time_embed.bias", Tensor::zeros(&[w]));
        p.push("input_embed.weight", init_uniform(rng, w, config.in_dim, 1.0));
        p.push("input_embed.bias", Tensor::zeros(&[w]));
        p.push("cond_embed.weight", init_uniform(rng, w, config.cond_dim, 1.0));
        p.push("cond_embed.bias", Tensor::zeros(&[w]));
        for i in 0..config.blocks {
            p.push(format!("blocks.{i}.fc1.weight"), init_uniform(rng, w, w, 2f64.sqrt()));
            p.push(format!("blocks.{i}.fc1.bias"), Tensor::zeros(&[w]));
            p.push(format!("blocks.{i}.fc2.weight"), init_uniform(rng, w, w, 1.0 / (config.blocks as f64).sqrt()));
            p.push(format!("blocks.{i}.fc2.bias"), Tensor::zeros(&[w]));
        }
        p.push("output.weight", Tensor::zeros(&[config.in_dim, w]));
        p.push("output.bias", Tensor::zeros(&[config.in_dim]));
        Ok(VelocityNet {
            freqs: config.frequencies(),
            config,
            params: p,
        })
    }

    /// Rebuilds a network from a parameter set, checking names and shapes.
    pub fn from_params(config: NetConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != params.len() {
            return Err(Error::shape("velocity net parameter count", &[layout.len()], &[params.len()]));
        }
        for ((name, shape), (pname, t)) in layout.iter().zip(params.iter()) {
            if name != pname || shape.as_slice() != t.shape() {
                return Err(Error::shape(format!("velocity net parameter {name}"), shape, t.shape()));
            }
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("velocity net parameters".into()));
        }
        Ok(VelocityNet {
            freqs: config.frequencies(),
            config,
            params,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }

    fn block_index(&self, i: usize) -> usize {
        BLOCKS + 4 * i
    }

    fn out_index(&self) -> usize {
        BLOCKS + 4 * self.config.blocks
    }

    fn p(&self, i: usize) -> &[f64] {
        self.params.get(i).data()
    }

    fn check_inputs(&self, x: &Tensor, cond: &Tensor) -> Result<()> {
        if x.len() != self.config.in_dim {
            return Err(Error::shape("velocity net input x", &[self.config.in_dim], x.shape()));
        }
        if cond.len() != self.config.cond_dim {
            return Err(Error::shape("velocity net cond", &[self.config.cond_dim], cond.shape()));
        }
        Ok(())
    }

    fn time_features(&self, t: f64) -> Vec<f64> {
        let k = self.freqs.len();
        let mut f = vec![0.0; 2 * k];
        for (i, &w) in self.freqs.iter().enumerate() {
            f[i] = (w * t).sin();
            f[k + i] = (w * t).cos();
        }
        f
    }

    fn time_features_tangent(&self, t: f64, v_t: f64) -> Vec<f64> {
        let k = self.freqs.len();
        let mut f = vec![0.0; 2 * k];
        for (i, &w) in self.freqs.iter().enumerate() {
            f[i] = w * (w * t).cos() * v_t;
            f[k + i] = -w * (w * t).sin() * v_t;
        }
        f
    }

    fn embed(&self, idx_w: usize, idx_b: usize, input: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.config.width];
        affine(self.p(idx_w), self.p(idx_b), input, &mut out);
        out
    }

    pub fn forward_cached(&self, x: &Tensor, t: f64, cond: &Tensor) -> Result<ForwardCache> {
        self.check_inputs(x, cond)?;
        let w = self.config.width;
        let feats = self.time_features(t);
        let temb = self.embed(TIME_W, TIME_B, &feats);
        let cemb = self.embed(COND_W, COND_B, cond.data());
        let mut h = self.embed(IN_W, IN_B, x.data());
        let n = self.config.blocks;
        let (mut mixed, mut pre, mut act) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for i in 0..n {
            let b = self.block_index(i);
            let u: Vec<f64> = (0..w).map(|j| h[j] + temb[j] + cemb[j]).collect();
            let mut a = vec![0.0; w];
            affine(self.p(b), self.p(b + 1), &u, &mut a);
            let z: Vec<f64> = a.iter().map(|&v| silu(v)).collect();
            let mut next = vec![0.0; w];
            affine(self.p(b + 2), self.p(b + 3), &z, &mut next);
            for (nv, &hv) in next.iter_mut().zip(&h) {
                *nv += hv;
            }
            h = next;
            mixed.push(u);
            pre.push(a);
            act.push(z);
        }
        let o = self.out_index();
        let mut out = vec![0.0; self.config.in_dim];
        affine(self.p(o), self.p(o + 1), &h, &mut out);
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("velocity net output".into()));
        }
        Ok(ForwardCache {
            feats,
            mixed,
            pre,
            act,
            last: h,
            out,
        })
    }

    /// `F(x, t, cond)`, shaped like `x`.
    pub fn forward(&self, x: &Tensor, t: f64, cond: &Tensor) -> Result<Tensor> {
        let cache = self.forward_cached(x, t, cond)?;
        Ok(Tensor::from_parts(x.shape().to_vec(), cache.out))
    }

    /// Accumulates `∂(upstream·F)/∂θ` into `grads` and returns `∂(upstream·F)/∂x`.
    pub fn accumulate_backward(
        &self,
        cache: &ForwardCache,
        x: &Tensor,
        cond: &Tensor,
        upstream: &[f64],
        grads: &mut ParamSet,
    ) -> Vec<f64> {
        let w = self.config.width;
        let o = self.out_index();
        let g = grads.tensors_mut();
        let mut dh = vec![0.0; w];
        {
            let (dw, db) = g[o..].split_at_mut(1);
            affine_backward(self.p(o), &cache.last, upstream, dw[0].data_mut(), db[0].data_mut(), Some(&mut dh));
        }
        let mut d_mixed_sum = vec![0.0; w];
        for i in (0..self.config.blocks).rev() {
            let b = self.block_index(i);
            let mut d_act = vec![0.0; w];
            {
                let (dw, db) = g[b + 2..].split_at_mut(1);
                affine_backward(self.p(b + 2), &cache.act[i], &dh, dw[0].data_mut(), db[0].data_mut(), Some(&mut d_act));
            }
            let d_pre: Vec<f64> = d_act.iter().zip(&cache.pre[i]).map(|(&d, &a)| d * silu_grad(a)).collect();
            let mut d_mixed = vec![0.0; w];
            {
                let (dw, db) = g[b..].split_at_mut(1);
                affine_backward(self.p(b), &cache.mixed[i], &d_pre, dw[0].data_mut(), db[0].data_mut(), Some(&mut d_mixed));
            }
            for j in 0..w {
                dh[j] += d_mixed[j];
                d_mixed_sum[j] += d_mixed[j];
            }
        }
        let mut dx = vec![0.0; self.config.in_dim];
        {
            let (dw, db) = g[IN_W..].split_at_mut(1);
            affine_backward(self.p(IN_W), x.data(), &dh, dw[0].data_mut(), db[0].data_mut(), Some(&mut dx));
        }
        {
            let (dw, db) = g[TIME_W..].split_at_mut(1);
            affine_backward(self.p(TIME_W), &cache.feats, &d_mixed_sum, dw[0].data_mut(), db[0].data_mut(), None);
        }
        {
            let (dw, db) = g[COND_W..].split_at_mut(1);
            affine_backward(self.p(COND_W), cond.data(), &d_mixed_sum, dw[0].data_mut(), db[0].data_mut(), None);
        }
        dx
    }

    /// Parameter gradients and input gradient of `upstream · F(x, t, cond)`.
    pub fn backward(&self, x: &Tensor, t: f64, cond: &Tensor, upstream: &Tensor) -> Result<(ParamSet, Tensor)> {
        if upstream.len() != self.config.in_dim {
            return Err(Error::shape("backward upstream", &[self.config.in_dim], upstream.shape()));
        }
        let cache = self.forward_cached(x, t, cond)?;
        let mut grads = self.params.zeros_like();
        let dx = self.accumulate_backward(&cache, x, cond, upstream.data(), &mut grads);
        if !grads.is_finite() || !dx.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("velocity net gradients".into()));
        }
        Ok((grads, Tensor::from_parts(x.shape().to_vec(), dx)))
    }

    // ---- forward mode, one stage at a time ----

    /// Time-embedding stage: `(temb, dtemb)` for the scalar pair `(t, v_t)`.
    pub fn time_embed_jvp(&self, t: f64, v_t: f64) -> DualTensor {
        let w = self.config.width;
        let value = self.embed(TIME_W, TIME_B, &self.time_features(t));
        let mut tangent = vec![0.0; w];
        linear(self.p(TIME_W), &self.time_features_tangent(t, v_t), &mut tangent);
        DualTensor::from_parts(value, tangent)
    }

    /// Input-embedding stage.
    pub fn input_embed_jvp(&self, x: &DualTensor) -> DualTensor {
        let w = self.config.width;
        let value = self.embed(IN_W, IN_B, x.value.data());
        let mut tangent = vec![0.0; w];
        linear(self.p(IN_W), x.tangent.data(), &mut tangent);
        DualTensor::from_parts(value, tangent)
    }

    /// Residual block `i`; the condition embedding carries no tangent.
    pub fn block_jvp(&self, i: usize, h: &DualTensor, temb: &DualTensor, cemb: &[f64]) -> DualTensor {
        let w = self.config.width;
        let b = self.block_index(i);
        let (hv, ht) = (h.value.data(), h.tangent.data());
        let (tv, tt) = (temb.value.data(), temb.tangent.data());
        let u: Vec<f64> = (0..w).map(|j| hv[j] + tv[j] + cemb[j]).collect();
        let du: Vec<f64> = (0..w).map(|j| ht[j] + tt[j]).collect();
        let mut a = vec![0.0; w];
        affine(self.p(b), self.p(b + 1), &u, &mut a);
        let mut da = vec![0.0; w];
        linear(self.p(b), &du, &mut da);
        let z: Vec<f64> = a.iter().map(|&v| silu(v)).collect();
        let dz: Vec<f64> = a.iter().zip(&da).map(|(&v, &d)| silu_grad(v) * d).collect();
        let mut next = vec![0.0; w];
        affine(self.p(b + 2), self.p(b + 3), &z, &mut next);
        let mut dnext = vec![0.0; w];
        linear(self.p(b + 2), &dz, &mut dnext);
        for j in 0..w {
            next[j] += hv[j];
            dnext[j] += ht[j];
        }
        DualTensor::from_parts(next, dnext)
    }

    /// Output stage.
    pub fn output_jvp(&self, h: &DualTensor) -> DualTensor {
        let o = self.out_index();
        let n = self.config.in_dim;
        let mut value = vec![0.0; n];
        affine(self.p(o), self.p(o + 1), h.value.data(), &mut value);
        let mut tangent = vec![0.0; n];
        linear(self.p(o), h.tangent.data(), &mut tangent);
        DualTensor::from_parts(value, tangent)
    }

    /// `(F, ∇ₓF·v_x + ∂ₜF·v_t)` computed stage by stage. Each stage consumes
    /// only the previous stage's (value, tangent) pair, and the result holds
    /// no reference to the parameters.
    pub fn jvp_blockwise(&self, x: &Tensor, t: f64, cond: &Tensor, v_x: &Tensor, v_t: f64) -> Result<(Tensor, Tensor)> {
        self.check_inputs(x, cond)?;
        if v_x.shape() != x.shape() {
            return Err(Error::shape("jvp tangent v_x", x.shape(), v_x.shape()));
        }
        let temb = self.time_embed_jvp(t, v_t);
        let cemb = self.embed(COND_W, COND_B, cond.data());
        let mut h = self.input_embed_jvp(&DualTensor::new(x.clone(), v_x.clone())?);
        for i in 0..self.config.blocks {
            h = self.block_jvp(i, &h, &temb, &cemb);
        }
        let y = self.output_jvp(&h);
        let (value, tangent) = y.into_parts();
        let value = value.reshape(x.shape())?;
        let tangent = tangent.reshape(x.shape())?;
        value.check_finite("jvp value")?;
        tangent.check_finite("jvp tangent")?;
        Ok((value, tangent))
    }
}
