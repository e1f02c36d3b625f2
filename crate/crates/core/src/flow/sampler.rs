use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::layers::sigmoid;

/// Draws are clamped to `[T_EPS, 1 − T_EPS]`.
pub const T_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Uniform,
    LogitNormal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimestepSampler {
    pub kind: SamplerKind,
    #[serde(default)]
    pub p_mean: f64,
    #[serde(default = "one")]
    pub p_std: f64,
}

fn one() -> f64 {
    1.0
}

impl TimestepSampler {
    pub fn uniform() -> Self {
        TimestepSampler {
            kind: SamplerKind::Uniform,
            p_mean: 0.0,
            p_std: 1.0,
        }
    }

    pub fn logit_normal(p_mean: f64, p_std: f64) -> Self {
        TimestepSampler {
            kind: SamplerKind::LogitNormal,
            p_mean,
            p_std,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_std > 0.0) || !self.p_mean.is_finite() || !self.p_std.is_finite() {
            return Err(Error::invalid(format!("timestep sampler needs finite p_mean and p_std > 0, got {self:?}")));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.kind {
            SamplerKind::Uniform => rng.random_range(T_EPS..1.0 - T_EPS),
            SamplerKind::LogitNormal => {
                let z: f64 = rng.sample(StandardNormal);
                Self::squash(self.p_mean + self.p_std * z)
            }
        }
    }

    /// `sigmoid(z)` clamped into the open interval.
    pub fn squash(z: f64) -> f64 {
        sigmoid(z).clamp(T_EPS, 1.0 - T_EPS)
    }
}

impl fmt::Display for TimestepSampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            SamplerKind::Uniform => write!(f, "uniform(0,1)"),
            SamplerKind::LogitNormal => write!(f, "lognorm({},{})", self.p_mean, self.p_std),
        }
    }
}
