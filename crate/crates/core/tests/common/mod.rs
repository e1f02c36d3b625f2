#![allow(dead_code)]

use flowdistill::numerics::{NetConfig, ParamSet, Tensor, VelocityNet};
use flowdistill::rng;

/// A net with every parameter random, including the output layer that
/// `VelocityNet::new` zeroes.
pub fn random_net(cfg: NetConfig, seed: u64) -> VelocityNet {
    let mut r = rng::stream(seed, "test-net");
    let mut net = VelocityNet::new(cfg, &mut r).unwrap();
    for t in net.params_mut().tensors_mut() {
        let fan_in = if t.shape().len() == 2 { t.shape()[1] } else { 4 };
        let s = 1.0 / (fan_in as f64).sqrt();
        for v in t.data_mut() {
            *v = s * rng::normal_vec(&mut r, 1)[0];
        }
    }
    net
}

pub fn with_params(net: &VelocityNet, p: &ParamSet) -> VelocityNet {
    VelocityNet::from_params(*net.config(), p.clone()).unwrap()
}

/// Central differences of `loss` in every coordinate of `params`.
pub fn fd_grad(params: &ParamSet, h: f64, loss: impl Fn(&ParamSet) -> f64) -> Vec<f64> {
    let mut p = params.clone();
    let mut out = Vec::with_capacity(params.numel());
    for ti in 0..params.len() {
        for j in 0..params.get(ti).len() {
            let orig = p.get(ti).data()[j];
            p.get_mut(ti).data_mut()[j] = orig + h;
            let up = loss(&p);
            p.get_mut(ti).data_mut()[j] = orig - h;
            let down = loss(&p);
            p.get_mut(ti).data_mut()[j] = orig;
            out.push((up - down) / (2.0 * h));
        }
    }
    out
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(1e-300)
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

pub fn bits(p: &ParamSet) -> Vec<u64> {
    p.flat().iter().map(|v| v.to_bits()).collect()
}
