//! Synthetic conditioned sequence data.
//!
//! A sample is a short "video" `frames: [F, D]` whose first frame is the
//! conditioning input.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct ToySample {
    pub cond: Tensor,
    pub frames: Tensor,
}

/// A training pair: clean sample (any shape) and its conditioning vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub x0: Tensor,
    pub cond: Tensor,
}

impl ToySample {
    pub fn example(&self) -> Example {
        Example {
            x0: self.frames.clone(),
            cond: self.cond.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Every frame i.i.d. `N(means, diag(scales²))`.
    Gaussian,
    /// A component `k` picks the appearance `means[k]`; later frames drift by
    /// `±f·drift` (direction drawn per sample) plus `scales[k]` noise.
    GaussianMixture,
    /// A Gaussian bump on a ring of `D` pixels moving `±drift` pixels per frame.
    MovingBlob,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub frames: usize,
    pub dim: usize,
    #[serde(default)]
    pub means: Vec<Vec<f64>>,
    #[serde(default)]
    pub scales: Vec<f64>,
    #[serde(default)]
    pub weights: Vec<f64>,
    #[serde(default)]
    pub drift: f64,
    #[serde(default = "default_blob_width")]
    pub blob_width: f64,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_blob_width() -> f64 {
    0.7
}
fn default_amplitude() -> f64 {
    1.0
}

impl DatasetSpec {
    pub fn gaussian(frames: usize, dim: usize, means: Vec<f64>, scales: Vec<f64>, seed: u64) -> Self {
        DatasetSpec {
            kind: DatasetKind::Gaussian,
            frames,
            dim,
            means: vec![means],
            scales,
            weights: vec![],
            drift: 0.0,
            blob_width: default_blob_width(),
            amplitude: default_amplitude(),
            seed,
        }
    }

    pub fn moving_blob(frames: usize, dim: usize, drift: f64, seed: u64) -> Self {
        DatasetSpec {
            kind: DatasetKind::MovingBlob,
            frames,
            dim,
            means: vec![],
            scales: vec![],
            weights: vec![],
            drift,
            blob_width: default_blob_width(),
            amplitude: default_amplitude(),
            seed,
        }
    }

    /// Four well-separated appearance modes in `D = 4`, two motion directions.
    pub fn default_mixture(seed: u64) -> Self {
        DatasetSpec {
            kind: DatasetKind::GaussianMixture,
            frames: 8,
            dim: 4,
            means: vec![
                vec![1.0, 1.0, -1.0, -1.0],
                vec![-1.0, 1.0, 1.0, -1.0],
                vec![1.0, -1.0, -1.0, 1.0],
                vec![-1.0, -1.0, 1.0, 1.0],
            ],
            scales: vec![0.2, 0.2, 0.2, 0.2],
            weights: vec![0.25, 0.25, 0.25, 0.25],
            drift: 0.4,
            blob_width: default_blob_width(),
            amplitude: default_amplitude(),
            seed,
        }
    }

    pub fn sample_shape(&self) -> [usize; 2] {
        [self.frames, self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.dim == 0 {
            return Err(Error::invalid("dataset needs frames > 0 and dim > 0"));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        match self.kind {
            DatasetKind::Gaussian => {
                if self.means.len() != 1 || self.means[0].len() != self.dim {
                    return Err(Error::invalid(format!("gaussian dataset needs one mean row of length {}", self.dim)));
                }
                if self.scales.len() != self.dim {
                    return Err(Error::invalid(format!("gaussian dataset needs {} scales", self.dim)));
                }
            }
            DatasetKind::GaussianMixture => {
                let k = self.means.len();
                if k == 0 || self.means.iter().any(|m| m.len() != self.dim) {
                    return Err(Error::invalid(format!("mixture needs mean rows of length {}", self.dim)));
                }
                if self.scales.len() != k || self.weights.len() != k {
                    return Err(Error::invalid(format!("mixture needs {k} scales and {k} weights")));
                }
                if self.weights.iter().any(|&w| !(w >= 0.0)) || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                    return Err(Error::invalid("mixture weights must be non-negative and sum to 1"));
                }
            }
            DatasetKind::MovingBlob => {
                if !(self.blob_width > 0.0) || !self.amplitude.is_finite() {
                    return Err(Error::invalid("moving blob needs a positive width and finite amplitude"));
                }
            }
        }
        if self.scales.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("all scales must be > 0"));
        }
        if !self.means.iter().all(|m| finite(m)) || !finite(&self.scales) || !self.drift.is_finite() {
            return Err(Error::invalid("dataset parameters must be finite"));
        }
        Ok(())
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> ToySample {
        let (nf, d) = (self.frames, self.dim);
        let mut frames = vec![0.0; nf * d];
        match self.kind {
            DatasetKind::Gaussian => {
                for f in 0..nf {
                    let z = rng::normal_vec(rng, d);
                    for j in 0..d {
                        frames[f * d + j] = self.means[0][j] + self.scales[j] * z[j];
                    }
                }
            }
            DatasetKind::GaussianMixture => {
                let u: f64 = rng.random();
                let mut k = 0;
                let mut acc = self.weights[0];
                while u >= acc && k + 1 < self.weights.len() {
                    k += 1;
                    acc += self.weights[k];
                }
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let s = self.scales[k];
                let z0 = rng::normal_vec(rng, d);
                for j in 0..d {
                    frames[j] = self.means[k][j] + s * z0[j];
                }
                for f in 1..nf {
                    let z = rng::normal_vec(rng, d);
                    for j in 0..d {
                        frames[f * d + j] = frames[j] + sign * f as f64 * self.drift + s * z[j];
                    }
                }
            }
            DatasetKind::MovingBlob => {
                let p0 = rng.random_range(0.0..d as f64);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let ring = d as f64;
                for f in 0..nf {
                    let centre = p0 + sign * f as f64 * self.drift;
                    for j in 0..d {
                        let mut dist = (j as f64 - centre).rem_euclid(ring);
                        if dist > ring / 2.0 {
                            dist = ring - dist;
                        }
                        frames[f * d + j] = self.amplitude * (-dist * dist / (2.0 * self.blob_width.powi(2))).exp();
                    }
                }
            }
        }
        let cond = Tensor::from_parts(vec![d], frames[..d].to_vec());
        ToySample {
            cond,
            frames: Tensor::from_parts(vec![nf, d], frames),
        }
    }
}

/// `n` samples; sample `i` uses its own stream so generation order is irrelevant.
pub fn make_dataset(spec: &DatasetSpec, n: usize) -> Result<Vec<ToySample>> {
    make_dataset_stream(spec, n, "dataset")
}

/// Like [`make_dataset`] but drawing from a differently labelled stream, for
/// held-out splits.
pub fn make_dataset_stream(spec: &DatasetSpec, n: usize, label: &str) -> Result<Vec<ToySample>> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be > 0"));
    }
    spec.validate()?;
    Ok((0..n)
        .into_par_iter()
        .map(|i| spec.draw(&mut rng::indexed(spec.seed, label, i as u64)))
        .collect())
}
