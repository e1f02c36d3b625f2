use crate::error::{Error, Result};
use crate::flow::VelocityField;
use crate::numerics::Tensor;
use crate::rng;
use rayon::prelude::*;

/// Uniform time grid from 1 down to 0.
#[derive(Clone, Debug, PartialEq)]
pub struct EulerSchedule {
    steps: usize,
    times: Vec<f64>,
}

impl EulerSchedule {
    pub fn new(steps: usize) -> Result<Self> {
        Self::between(1.0, 0.0, steps)
    }

    /// `steps` equal intervals from `from` down to `to`; endpoints are exact.
    pub fn between(from: f64, to: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("an Euler schedule needs at least one step"));
        }
        if !(from > to) {
            return Err(Error::invalid(format!("schedule must descend, got {from} -> {to}")));
        }
        let n = steps as f64;
        let times = (0..=steps)
            .map(|k| {
                let k = k as f64;
                (from * (n - k) + to * k) / n
            })
            .collect();
        Ok(EulerSchedule { steps, times })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }
}

/// Integrates `dx/dt = F` backwards along `schedule` with explicit Euler steps
/// `x ← x − (t_k − t_{k+1})·F(x, t_k)`.
pub fn euler_integrate(field: &impl VelocityField, x: &Tensor, cond: &Tensor, schedule: &EulerSchedule) -> Result<Tensor> {
    let mut x = x.clone();
    for (k, w) in schedule.times.windows(2).enumerate() {
        let v = field.velocity(&x, w[0], cond)?;
        let dt = w[0] - w[1];
        for (a, &b) in x.data_mut().iter_mut().zip(v.data()) {
            *a -= dt * b;
        }
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("euler state at step {k} (t = {})", w[0])));
        }
    }
    Ok(x)
}

/// Sample from noise `x1` at `t = 1` down to `t = 0`.
pub fn euler_sample(field: &impl VelocityField, x1: &Tensor, cond: &Tensor, schedule: &EulerSchedule) -> Result<Tensor> {
    euler_integrate(field, x1, cond, schedule)
}

/// Integrates from `from` to `to` with step size at most `max_dt`.
pub fn euler_to(field: &impl VelocityField, x: &Tensor, cond: &Tensor, from: f64, to: f64, max_dt: f64) -> Result<Tensor> {
    if from == to {
        return Ok(x.clone());
    }
    let steps = ((from - to) / max_dt - 1e-9).ceil().max(1.0) as usize;
    euler_integrate(field, x, cond, &EulerSchedule::between(from, to, steps)?)
}

/// Draws one sample per condition from noise stream `(seed, label, i)`, in parallel.
pub fn sample_many(
    field: &impl VelocityField,
    conds: &[Tensor],
    shape: &[usize],
    schedule: &EulerSchedule,
    seed: u64,
    label: &str,
) -> Result<Vec<Tensor>> {
    conds
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let x1 = rng::normal_tensor(&mut rng::indexed(seed, label, i as u64), shape);
            euler_sample(field, &x1, c, schedule)
        })
        .collect()
}
