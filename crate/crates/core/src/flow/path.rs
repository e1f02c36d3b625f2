use crate::error::{Error, Result};
use crate::flow::Example;
use crate::numerics::{ParamSet, Tensor, VelocityNet};

/// Anything that predicts a velocity `F(x, t, cond)`.
pub trait VelocityField: Sync {
    fn velocity(&self, x: &Tensor, t: f64, cond: &Tensor) -> Result<Tensor>;
}

impl VelocityField for VelocityNet {
    fn velocity(&self, x: &Tensor, t: f64, cond: &Tensor) -> Result<Tensor> {
        self.forward(x, t, cond)
    }
}

impl<T: VelocityField + ?Sized> VelocityField for &T {
    fn velocity(&self, x: &Tensor, t: f64, cond: &Tensor) -> Result<Tensor> {
        (**self).velocity(x, t, cond)
    }
}

/// Adapts a closure into a [`VelocityField`].
pub struct FnField<F>(pub F);

impl<F> VelocityField for FnField<F>
where
    F: Fn(&Tensor, f64, &Tensor) -> Result<Tensor> + Sync,
{
    fn velocity(&self, x: &Tensor, t: f64, cond: &Tensor) -> Result<Tensor> {
        (self.0)(x, t, cond)
    }
}

/// `(1 − t)·x0 + t·x1`.
pub fn interpolate(x0: &Tensor, x1: &Tensor, t: f64) -> Result<Tensor> {
    if x0.shape() != x1.shape() {
        return Err(Error::shape("interpolate", x0.shape(), x1.shape()));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("interpolation time must lie in [0, 1], got {t}")));
    }
    let data = x0.data().iter().zip(x1.data()).map(|(&a, &b)| (1.0 - t) * a + t * b).collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// One-step origin prediction `x_t − t·F(x_t, t)`; exactly `x_t` at `t = 0`.
pub fn consistency_fn(field: &impl VelocityField, x_t: &Tensor, t: f64, cond: &Tensor) -> Result<Tensor> {
    if t == 0.0 {
        return Ok(x_t.clone());
    }
    let v = field.velocity(x_t, t, cond)?;
    let data = x_t.data().iter().zip(v.data()).map(|(&x, &f)| x - t * f).collect();
    Tensor::new(x_t.shape().to_vec(), data)
}

/// Loss value and parameter gradients.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    pub grads: ParamSet,
}

fn check_batch(batch: &[Example], noise: &[Tensor], t: &[f64]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if noise.len() != batch.len() || t.len() != batch.len() {
        return Err(Error::invalid(format!(
            "batch of {} examples with {} noise draws and {} times",
            batch.len(),
            noise.len(),
            t.len()
        )));
    }
    Ok(())
}

/// Batch mean of `‖(x1 − x0) − F(x_t, t, cond)‖²` for any velocity field.
pub fn fm_loss_value(field: &impl VelocityField, batch: &[Example], noise: &[Tensor], t: &[f64]) -> Result<f64> {
    check_batch(batch, noise, t)?;
    let mut total = 0.0;
    for ((ex, x1), &ti) in batch.iter().zip(noise).zip(t) {
        let x_t = interpolate(&ex.x0, x1, ti)?;
        let target = x1.sub(&ex.x0)?;
        total += target.sub(&field.velocity(&x_t, ti, &ex.cond)?)?.sq_norm();
    }
    Ok(total / batch.len() as f64)
}

/// Flow-matching loss with gradients through the network.
pub fn fm_loss(net: &VelocityNet, batch: &[Example], noise: &[Tensor], t: &[f64]) -> Result<LossGrad> {
    check_batch(batch, noise, t)?;
    let scale = 1.0 / batch.len() as f64;
    let mut grads = net.params().zeros_like();
    let mut loss = 0.0;
    for ((ex, x1), &ti) in batch.iter().zip(noise).zip(t) {
        let x_t = interpolate(&ex.x0, x1, ti)?;
        let cache = net.forward_cached(&x_t, ti, &ex.cond)?;
        let resid: Vec<f64> = cache
            .output()
            .iter()
            .zip(x1.data().iter().zip(ex.x0.data()))
            .map(|(&f, (&a, &b))| f - (a - b))
            .collect();
        loss += resid.iter().map(|r| r * r).sum::<f64>() * scale;
        let up: Vec<f64> = resid.iter().map(|r| 2.0 * scale * r).collect();
        net.accumulate_backward(&cache, &x_t, &ex.cond, &up, &mut grads);
    }
    if !grads.is_finite() || !loss.is_finite() {
        return Err(Error::NonFinite("flow matching loss".into()));
    }
    Ok(LossGrad { loss, grads })
}
