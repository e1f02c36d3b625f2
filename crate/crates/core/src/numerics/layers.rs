//! Slice-level building blocks shared by the velocity network, the frozen
//! feature network and the discriminator heads.

use rand::Rng;

use crate::numerics::{ParamSet, Tensor};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `out = W x + b` with `W` row-major `[out, in]`.
pub fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    debug_assert_eq!(w.len(), out.len() * n_in);
    for (o, (row, &bias)) in out.iter_mut().zip(w.chunks_exact(n_in).zip(b)) {
        *o = bias + crate::numerics::tensor::dot(row, x);
    }
}

/// `out = W x` (tangent propagation through an affine map).
pub fn linear(w: &[f64], x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(n_in)) {
        *o = crate::numerics::tensor::dot(row, x);
    }
}

/// Accumulates `dW += up xᵀ`, `db += up` and, when requested, `dx += Wᵀ up`.
pub fn affine_backward(
    w: &[f64],
    x: &[f64],
    up: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    let n_in = x.len();
    for ((&u, dw_row), dbi) in up.iter().zip(dw.chunks_exact_mut(n_in)).zip(db.iter_mut()) {
        if u == 0.0 {
            continue;
        }
        *dbi += u;
        for (d, &xi) in dw_row.iter_mut().zip(x) {
            *d += u * xi;
        }
    }
    if let Some(dx) = dx {
        for (&u, row) in up.iter().zip(w.chunks_exact(n_in)) {
            if u == 0.0 {
                continue;
            }
            for (d, &wij) in dx.iter_mut().zip(row) {
                *d += u * wij;
            }
        }
    }
}

/// Uniform fan-in initialization with variance `gain² / fan_in`.
pub fn init_uniform<R: Rng + ?Sized>(rng: &mut R, out: usize, fan_in: usize, gain: f64) -> Tensor {
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    let data = (0..out * fan_in).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_parts(vec![out, fan_in], data)
}

/// Two affine layers with a SiLU in between, stored as four consecutive
/// entries of a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mlp2 {
    pub base: usize,
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

pub struct Mlp2Cache {
    pub pre: Vec<f64>,
    pub act: Vec<f64>,
    pub out: Vec<f64>,
}

impl Mlp2 {
    /// Appends freshly initialized parameters. `zero_output` zeroes the second layer.
    pub fn register<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        (input, hidden, output): (usize, usize, usize),
        zero_output: bool,
        rng: &mut R,
    ) -> Self {
        let base = params.push(format!("{prefix}.fc1.weight"), init_uniform(rng, hidden, input, 2f64.sqrt()));
        params.push(format!("{prefix}.fc1.bias"), Tensor::zeros(&[hidden]));
        let w2 = if zero_output {
            Tensor::zeros(&[output, hidden])
        } else {
            init_uniform(rng, output, hidden, 1.0)
        };
        params.push(format!("{prefix}.fc2.weight"), w2);
        params.push(format!("{prefix}.fc2.bias"), Tensor::zeros(&[output]));
        Mlp2 {
            base,
            input,
            hidden,
            output,
        }
    }

    pub fn forward(&self, p: &ParamSet, x: &[f64]) -> Mlp2Cache {
        let mut pre = vec![0.0; self.hidden];
        affine(p.get(self.base).data(), p.get(self.base + 1).data(), x, &mut pre);
        let act: Vec<f64> = pre.iter().map(|&a| silu(a)).collect();
        let mut out = vec![0.0; self.output];
        affine(p.get(self.base + 2).data(), p.get(self.base + 3).data(), &act, &mut out);
        Mlp2Cache { pre, act, out }
    }

    /// Accumulates parameter gradients into `grads` (when given) and returns `∂/∂x`.
    pub fn backward(
        &self,
        p: &ParamSet,
        x: &[f64],
        cache: &Mlp2Cache,
        up: &[f64],
        grads: Option<&mut ParamSet>,
    ) -> Vec<f64> {
        let w1 = p.get(self.base).data();
        let w2 = p.get(self.base + 2).data();
        let mut d_act = vec![0.0; self.hidden];
        for (&u, row) in up.iter().zip(w2.chunks_exact(self.hidden)) {
            for (d, &w) in d_act.iter_mut().zip(row) {
                *d += u * w;
            }
        }
        let d_pre: Vec<f64> = d_act.iter().zip(&cache.pre).map(|(&d, &a)| d * silu_grad(a)).collect();
        let mut dx = vec![0.0; self.input];
        match grads {
            Some(g) => {
                let (lo, hi) = g.tensors_mut().split_at_mut(self.base + 2);
                let (dw2, db2) = hi.split_at_mut(1);
                affine_backward(w2, &cache.act, up, dw2[0].data_mut(), db2[0].data_mut(), None);
                let (dw1, db1) = lo[self.base..].split_at_mut(1);
                affine_backward(w1, x, &d_pre, dw1[0].data_mut(), db1[0].data_mut(), Some(&mut dx));
            }
            None => {
                for (&u, row) in d_pre.iter().zip(w1.chunks_exact(self.input)) {
                    for (d, &w) in dx.iter_mut().zip(row) {
                        *d += u * w;
                    }
                }
            }
        }
        dx
    }
}
