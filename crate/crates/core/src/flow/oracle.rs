use crate::error::{Error, Result};
use crate::flow::VelocityField;
use crate::numerics::Tensor;

/// Closed-form flow quantities when data is `N(mean, diag(var))` and noise is `N(0, I)`.
///
/// Per coordinate `x_t = (1−t)x0 + t·x1` and `v = x1 − x0` are jointly Gaussian with
/// `Var(x_t) = (1−t)²s² + t²` and `Cov(x_t, v) = t − (1−t)s²`, so the marginal velocity
/// is a linear regression of `v` on `x_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianOracle {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl GaussianOracle {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() || mean.is_empty() {
            return Err(Error::shape("gaussian oracle variance", &[mean.len()], &[var.len()]));
        }
        if var.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("gaussian oracle needs finite means and non-negative variances"));
        }
        Ok(GaussianOracle { mean, var })
    }

    pub fn isotropic(dim: usize, mean: f64, var: f64) -> Result<Self> {
        Self::new(vec![mean; dim], vec![var; dim])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, x: &Tensor, t: f64) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::shape("gaussian oracle input", &[self.dim()], x.shape()));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!("oracle time must lie in [0, 1], got {t}")));
        }
        Ok(())
    }

    fn sigma_sq(&self, i: usize, t: f64) -> f64 {
        let s = 1.0 - t;
        s * s * self.var[i] + t * t
    }

    /// `E[x1 − x0 | x_t = x]`.
    pub fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self.check(x, t)?;
        let mut out = Vec::with_capacity(x.len());
        for (i, &xi) in x.data().iter().enumerate() {
            let var_xt = self.sigma_sq(i, t);
            if var_xt == 0.0 {
                return Err(Error::invalid(format!(
                    "singular conditioning at t = {t}: coordinate {i} of x_t is deterministic"
                )));
            }
            let m = self.mean[i];
            let cov = t - (1.0 - t) * self.var[i];
            out.push(-m + cov / var_xt * (xi - (1.0 - t) * m));
        }
        Tensor::new(x.shape().to_vec(), out)
    }

    /// Origin of the probability-flow trajectory through `(x, t)`.
    ///
    /// The flow keeps `z = (x_t − (1−t)m)/σ_t` constant, so `x_0 = m + s·z`.
    pub fn consistency_map(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self.check(x, t)?;
        let mut out = Vec::with_capacity(x.len());
        for (i, &xi) in x.data().iter().enumerate() {
            let sigma = self.sigma_sq(i, t).sqrt();
            let m = self.mean[i];
            if sigma == 0.0 {
                out.push(xi);
            } else {
                out.push(m + self.var[i].sqrt() * (xi - (1.0 - t) * m) / sigma);
            }
        }
        Tensor::new(x.shape().to_vec(), out)
    }

    /// Point at time `t` on the trajectory with standardized coordinate `z`.
    pub fn trajectory_point(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        self.check(z, t)?;
        let data = z
            .data()
            .iter()
            .enumerate()
            .map(|(i, &zi)| (1.0 - t) * self.mean[i] + self.sigma_sq(i, t).sqrt() * zi)
            .collect();
        Tensor::new(z.shape().to_vec(), data)
    }

    /// `(x_t − x_0)/t`, the average velocity over `[0, t]`; the instantaneous velocity at `t = 0`.
    pub fn average_velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        if t == 0.0 {
            return self.velocity(x, t);
        }
        let origin = self.consistency_map(x, t)?;
        x.sub(&origin)?.scaled(1.0 / t)
    }
}

impl VelocityField for GaussianOracle {
    fn velocity(&self, x: &Tensor, t: f64, _cond: &Tensor) -> Result<Tensor> {
        GaussianOracle::velocity(self, x, t)
    }
}

/// Marginal velocity for isotropic Gaussian data `N(mean0, var0·I)`.
pub fn gaussian_oracle_velocity(x: &Tensor, t: f64, mean0: f64, var0: f64) -> Result<Tensor> {
    GaussianOracle::isotropic(x.len(), mean0, var0)?.velocity(x, t)
}
