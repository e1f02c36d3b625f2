//! Fréchet distance in a frozen feature space and trajectory diagnostics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dist_align::FeatureNet;
use crate::error::{Error, Result};
use crate::flow::{consistency_fn, euler_to, sample_many, EulerSchedule, Example, VelocityField};
use crate::numerics::Tensor;
use crate::rng;

/// Eigenvalues below this magnitude are treated as zero.
pub const EIG_CLAMP: f64 = 1e-10;

/// Step size of the reference teacher trajectories.
pub const REFERENCE_DT: f64 = 1.0 / 1024.0;

#[derive(Clone, Debug, PartialEq)]
pub struct FrechetStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl FrechetStats {
    /// Sample mean and unbiased covariance of the rows.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::invalid(format!("need at least 2 samples for a covariance, got {n}")));
        }
        let m = rows[0].len();
        if m == 0 || rows.iter().any(|r| r.len() != m) {
            return Err(Error::invalid("feature rows must be non-empty and of equal length"));
        }
        let data = DMatrix::from_fn(n, m, |i, j| rows[i][j]);
        let mean = data.row_mean().transpose();
        let centered = DMatrix::from_fn(n, m, |i, j| data[(i, j)] - mean[j]);
        let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
        cov = (&cov + cov.transpose()) * 0.5;
        if !cov.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("feature covariance".into()));
        }
        Ok(FrechetStats { mean, cov, n })
    }

    /// Stats of a known Gaussian, for closed-form checks.
    pub fn from_moments(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> Result<Self> {
        let m = mean.len();
        if cov.len() != m || cov.iter().any(|r| r.len() != m) {
            return Err(Error::shape("covariance", &[m, m], &[cov.len()]));
        }
        Ok(FrechetStats {
            mean: DVector::from_vec(mean),
            cov: DMatrix::from_fn(m, m, |i, j| cov[i][j]),
            n: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|l| if l < EIG_CLAMP { 0.0 } else { l.sqrt() });
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2(Σa^{1/2} Σb Σa^{1/2})^{1/2})`.
pub fn frechet_distance(a: &FrechetStats, b: &FrechetStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape("frechet statistics", &[a.dim()], &[b.dim()]));
    }
    let root_a = psd_sqrt(&a.cov);
    let inner = &root_a * &b.cov * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|&l| if l < EIG_CLAMP { 0.0 } else { l.sqrt() })
        .sum();
    let d = (&a.mean - &b.mean).norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    if !d.is_finite() {
        return Err(Error::NonFinite("frechet distance".into()));
    }
    Ok(d.max(0.0))
}

/// Scores sample sets against fixed real-data statistics.
#[derive(Clone, Debug)]
pub struct FrechetEvaluator {
    fnet: FeatureNet,
    reference: FrechetStats,
}

impl FrechetEvaluator {
    pub fn new(fnet: FeatureNet, real: &[Tensor]) -> Result<Self> {
        let reference = Self::stats_with(&fnet, real)?;
        Ok(FrechetEvaluator { fnet, reference })
    }

    fn stats_with(fnet: &FeatureNet, samples: &[Tensor]) -> Result<FrechetStats> {
        let rows: Vec<Vec<f64>> = samples.par_iter().map(|s| fnet.embed_frames(s.data())).collect();
        FrechetStats::fit(&rows)
    }

    pub fn stats(&self, samples: &[Tensor]) -> Result<FrechetStats> {
        Self::stats_with(&self.fnet, samples)
    }

    pub fn score(&self, samples: &[Tensor]) -> Result<f64> {
        frechet_distance(&self.reference, &self.stats(samples)?)
    }

    pub fn reference(&self) -> &FrechetStats {
        &self.reference
    }
}

fn check_times(t1: f64, t2: f64) -> Result<()> {
    if !(0.0 <= t1 && t1 <= t2 && t2 <= 1.0) {
        return Err(Error::invalid(format!("need 0 <= t1 <= t2 <= 1, got t1 = {t1}, t2 = {t2}")));
    }
    Ok(())
}

/// Points at `t2` and `t1` of `n` teacher trajectories started from seeded noise.
pub fn reference_trajectories(
    teacher: &impl VelocityField,
    data: &[Example],
    t1: f64,
    t2: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<(Tensor, Tensor, Tensor)>> {
    check_times(t1, t2)?;
    if data.is_empty() || n == 0 {
        return Err(Error::invalid("reference trajectories need data and n > 0"));
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let ex = &data[i % data.len()];
            let x1 = rng::normal_tensor(&mut rng::indexed(seed, "defect-noise", i as u64), ex.x0.shape());
            let x_t2 = euler_to(teacher, &x1, &ex.cond, 1.0, t2, REFERENCE_DT)?;
            let x_t1 = euler_to(teacher, &x_t2, &ex.cond, t2, t1, REFERENCE_DT)?;
            Ok((x_t1, x_t2, ex.cond.clone()))
        })
        .collect()
}

/// Mean `‖f(x_{t1}, t1) − f(x_{t2}, t2)‖` along teacher trajectories.
pub fn consistency_defect_on(student: &impl VelocityField, trajectories: &[(Tensor, Tensor, Tensor)], t1: f64, t2: f64) -> Result<f64> {
    let total = trajectories
        .par_iter()
        .map(|(x1, x2, c)| Ok(consistency_fn(student, x1, t1, c)?.sub(&consistency_fn(student, x2, t2, c)?)?.norm()))
        .collect::<Result<Vec<f64>>>()?
        .iter()
        .sum::<f64>();
    Ok(total / trajectories.len() as f64)
}

pub fn consistency_defect(
    student: &impl VelocityField,
    teacher: &impl VelocityField,
    data: &[Example],
    (t1, t2): (f64, f64),
    n: usize,
    seed: u64,
) -> Result<f64> {
    let traj = reference_trajectories(teacher, data, t1, t2, n, seed)?;
    consistency_defect_on(student, &traj, t1, t2)
}

/// Mean `‖sample(model, a) − sample(reference, b)‖` over shared noise.
pub fn endpoint_deviation(
    model: &impl VelocityField,
    schedule_a: &EulerSchedule,
    reference: &impl VelocityField,
    schedule_b: &EulerSchedule,
    data: &[Example],
    n: usize,
    seed: u64,
) -> Result<f64> {
    if data.is_empty() || n == 0 {
        return Err(Error::invalid("endpoint deviation needs data and n > 0"));
    }
    let conds: Vec<Tensor> = (0..n).map(|i| data[i % data.len()].cond.clone()).collect();
    let shape = data[0].x0.shape();
    let a = sample_many(model, &conds, shape, schedule_a, seed, "endpoint-noise")?;
    let b = sample_many(reference, &conds, shape, schedule_b, seed, "endpoint-noise")?;
    let mut total = 0.0;
    for (x, y) in a.iter().zip(&b) {
        total += x.sub(y)?.norm();
    }
    Ok(total / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub steps: usize,
    pub seed: u64,
    pub frechet: f64,
    /// Only present when a teacher is available.
    pub consistency_defect: Option<f64>,
    pub endpoint_deviation: Option<f64>,
}

/// Fréchet score per step count, with the same noise and conditions for every count.
pub fn step_sweep(
    model: &impl VelocityField,
    evaluator: &FrechetEvaluator,
    conds: &[Tensor],
    sample_shape: &[usize],
    steps_list: &[usize],
    seed: u64,
) -> Result<Vec<MetricReport>> {
    if steps_list.is_empty() || steps_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid(format!("steps_list must be non-empty and ascending, got {steps_list:?}")));
    }
    steps_list
        .iter()
        .map(|&steps| {
            let samples = sample_many(model, conds, sample_shape, &EulerSchedule::new(steps)?, seed, "sweep-noise")?;
            Ok(MetricReport {
                steps,
                seed,
                frechet: evaluator.score(&samples)?,
                consistency_defect: None,
                endpoint_deviation: None,
            })
        })
        .collect()
}
