//! In-memory pipeline: every stage as a function of the config and its inputs.
//!
//! Each stage draws from its own named stream of the run seed, so running a
//! stage from a checkpoint gives the same result as running it in-process.

use anyhow::Context;
use rand::Rng;
use serde::{Deserialize, Serialize};

use flowdistill::ccd::{ccd_train_step, dcd_train_step, CcdBatchTrace, CcdConfig, Objective};
use flowdistill::dist_align::{da_train_step_with, DaTrace, DiscriminatorHeads, FeatureNet};
use flowdistill::flow::{
    make_dataset_stream, sample_many, train_teacher, EulerSchedule, Example, TimestepSampler, VelocityField,
};
use flowdistill::metrics::{consistency_defect, endpoint_deviation, step_sweep, FrechetEvaluator, MetricReport};
use flowdistill::numerics::{Tensor, TrainState, VelocityNet};
use flowdistill::rng;
use flowdistill::traj_align::{synthesize_preferences, ta_train_round, PreferencePair, TaTrace};

use crate::config::ExperimentConfig;

/// Data, evaluator and config shared by all stages of one run.
pub struct Workspace {
    pub cfg: ExperimentConfig,
    pub train: Vec<Example>,
    pub eval_real: Vec<Tensor>,
    pub eval_conds: Vec<Tensor>,
    pub evaluator: FrechetEvaluator,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub iter: u64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub variant: String,
    pub seed: u64,
    pub steps: usize,
    pub frechet: f64,
    /// Final-quartile mean Win Diff, for TA variants.
    pub win_diff: Option<f64>,
}

pub const AXES: [&str; 3] = ["t_sampler", "objective", "lambda_rf"];

impl Workspace {
    pub fn new(cfg: ExperimentConfig) -> anyhow::Result<Self> {
        cfg.validate()?;
        let train = make_dataset_stream(&cfg.dataset, cfg.data.train, "train")?.iter().map(|s| s.example()).collect();
        let evals = make_dataset_stream(&cfg.dataset, cfg.data.eval, "eval")?;
        let eval_real: Vec<Tensor> = evals.iter().map(|s| s.frames.clone()).collect();
        let eval_conds = evals.iter().map(|s| s.cond.clone()).collect();
        let fnet = FeatureNet::new(cfg.dataset.dim, cfg.da.features, &mut rng::stream(cfg.eval.feature_seed, "eval-features"))?;
        let evaluator = FrechetEvaluator::new(fnet, &eval_real)?;
        Ok(Workspace { cfg, train, eval_real, eval_conds, evaluator })
    }

    pub fn seed(&self) -> u64 {
        self.cfg.seed
    }

    pub fn sample_shape(&self) -> [usize; 2] {
        self.cfg.dataset.sample_shape()
    }

    fn stream(&self, label: &str) -> rng::StreamRng {
        rng::stream(self.cfg.seed, label)
    }

    pub fn disc_features(&self) -> anyhow::Result<FeatureNet> {
        Ok(FeatureNet::new(self.cfg.dataset.dim, self.cfg.da.features, &mut self.stream("disc-features"))?)
    }

    pub fn train_teacher(&self) -> anyhow::Result<(VelocityNet, Vec<LossRow>)> {
        let mut net = VelocityNet::new(self.cfg.net_config(), &mut self.stream("init"))?;
        let losses = train_teacher(&mut net, &self.train, &self.cfg.teacher, &mut self.stream("teacher"))?;
        let rows = losses.into_iter().enumerate().map(|(i, loss)| LossRow { iter: i as u64, loss }).collect();
        Ok((net, rows))
    }

    /// `ccd.total_iters` CCD iterations from the teacher.
    pub fn distill_ccd(&self, teacher: &VelocityNet) -> anyhow::Result<(TrainState, Vec<CcdBatchTrace>)> {
        self.distill_ccd_with(teacher, &self.cfg.ccd)
    }

    pub fn distill_ccd_with(&self, teacher: &VelocityNet, ccd: &CcdConfig) -> anyhow::Result<(TrainState, Vec<CcdBatchTrace>)> {
        let mut state = TrainState::new(teacher.clone());
        let mut r = self.stream("distill");
        let trace = (0..ccd.total_iters)
            .map(|_| ccd_train_step(teacher, &mut state, ccd, &self.train, &mut r))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((state, trace))
    }

    /// The discrete-time baseline with the same iteration budget.
    pub fn distill_dcd(&self, teacher: &VelocityNet) -> anyhow::Result<(TrainState, Vec<LossRow>)> {
        let mut state = TrainState::new(teacher.clone());
        let mut r = self.stream("distill");
        let mut rows = Vec::with_capacity(self.cfg.ccd.total_iters as usize);
        for iter in 0..self.cfg.ccd.total_iters {
            let loss = dcd_train_step(teacher, &mut state, &self.cfg.ccd, &self.train, &mut r, self.cfg.dcd.delta_t)?;
            rows.push(LossRow { iter, loss });
        }
        Ok((state, rows))
    }

    pub fn fresh_heads(&self) -> anyhow::Result<DiscriminatorHeads> {
        let frames = self.cfg.dataset.frames;
        Ok(DiscriminatorHeads::new(frames, self.cfg.da.features, self.cfg.da.disc_hidden, &mut self.stream("heads"))?)
    }

    /// `da.iters` alignment iterations continuing `state` with `objective` as the distillation term.
    pub fn align_da(
        &self,
        teacher: &VelocityNet,
        state: TrainState,
        objective: Objective,
    ) -> anyhow::Result<(TrainState, DiscriminatorHeads, Vec<DaTrace>)> {
        self.align_da_with(teacher, state, objective, &self.cfg.ccd, self.cfg.da.n_warmup)
    }

    fn align_da_with(
        &self,
        teacher: &VelocityNet,
        mut state: TrainState,
        objective: Objective,
        ccd: &CcdConfig,
        n_warmup: u64,
    ) -> anyhow::Result<(TrainState, DiscriminatorHeads, Vec<DaTrace>)> {
        let fnet = self.disc_features()?;
        let mut heads = self.fresh_heads()?;
        let mut da = self.cfg.da_config();
        da.n_warmup = n_warmup;
        let mut r = self.stream("align-da");
        let mut trace = Vec::with_capacity(self.cfg.da.iters as usize);
        for _ in 0..self.cfg.da.iters {
            trace.push(da_train_step_with(objective, teacher, &mut state, &mut heads, &fnet, ccd, &da, &self.train, &mut r)?);
        }
        Ok((state, heads, trace))
    }

    /// The CCD-only control: `da.iters` more CCD iterations on the stream alignment would use.
    pub fn continue_ccd(&self, teacher: &VelocityNet, mut state: TrainState) -> anyhow::Result<TrainState> {
        let mut r = self.stream("align-da");
        for _ in 0..self.cfg.da.iters {
            ccd_train_step(teacher, &mut state, &self.cfg.ccd, &self.train, &mut r)?;
        }
        Ok(state)
    }

    /// Adversarial loss alone for the whole distillation plus alignment budget.
    pub fn adversarial_only(&self, teacher: &VelocityNet) -> anyhow::Result<TrainState> {
        let mut state = TrainState::new(teacher.clone());
        let fnet = self.disc_features()?;
        let mut heads = self.fresh_heads()?;
        let mut da = self.cfg.da_config();
        da.n_warmup = 0;
        let mut r = self.stream("distill");
        for _ in 0..self.cfg.ccd.total_iters + self.cfg.da.iters {
            da_train_step_with(Objective::Adversarial, teacher, &mut state, &mut heads, &fnet, &self.cfg.ccd, &da, &self.train, &mut r)?;
        }
        Ok(state)
    }

    pub fn synthesize(&self, model: &VelocityNet, round: usize) -> anyhow::Result<Vec<PreferencePair>> {
        let cfg = self.cfg.ta_config(round)?;
        let seed: u64 = self.stream(&format!("ta-pairs-{round}")).random();
        let conds: Vec<Tensor> = self.train.iter().map(|e| e.cond.clone()).collect();
        Ok(synthesize_preferences(model, &conds, &self.sample_shape(), &cfg, seed)?)
    }

    /// Round `round` of trajectory alignment with `model` as the frozen reference.
    pub fn align_ta(
        &self,
        model: &VelocityNet,
        prefs: &[PreferencePair],
        round: usize,
        lambda_rf: Option<f64>,
    ) -> anyhow::Result<(VelocityNet, Vec<TaTrace>)> {
        let mut cfg = self.cfg.ta_config(round)?;
        if let Some(l) = lambda_rf {
            cfg.lambda_rf = l;
        }
        let mut student = model.clone();
        let trace = ta_train_round(&mut student, model, prefs, &cfg, &mut self.stream(&format!("ta-round-{round}")))?;
        Ok((student, trace))
    }

    pub fn sample(&self, model: &impl VelocityField, steps: usize, n: usize) -> anyhow::Result<Vec<Tensor>> {
        let conds: Vec<Tensor> = (0..n).map(|i| self.eval_conds[i % self.eval_conds.len()].clone()).collect();
        Ok(sample_many(model, &conds, &self.sample_shape(), &EulerSchedule::new(steps)?, self.cfg.seed, "sample-noise")?)
    }

    pub fn sweep(&self, model: &impl VelocityField) -> anyhow::Result<Vec<MetricReport>> {
        self.sweep_steps(model, &self.cfg.eval.steps_list)
    }

    pub fn sweep_steps(&self, model: &impl VelocityField, steps: &[usize]) -> anyhow::Result<Vec<MetricReport>> {
        Ok(step_sweep(model, &self.evaluator, &self.eval_conds, &self.sample_shape(), steps, self.cfg.seed)?)
    }

    pub fn frechet(&self, model: &impl VelocityField, steps: usize) -> anyhow::Result<f64> {
        Ok(self.sweep_steps(model, &[steps])?[0].frechet)
    }

    /// Fréchet score plus, with a teacher, the consistency defect and the
    /// endpoint deviation from the teacher's fine-step reference.
    pub fn evaluate(&self, model: &VelocityNet, teacher: Option<&VelocityNet>, steps: usize) -> anyhow::Result<MetricReport> {
        let mut report = self.sweep_steps(model, &[steps])?.remove(0);
        if let Some(teacher) = teacher {
            let e = &self.cfg.eval;
            let data: Vec<Example> = self.eval_real.iter().zip(&self.eval_conds).map(|(x, c)| Example { x0: x.clone(), cond: c.clone() }).collect();
            let times = (e.defect_times[0], e.defect_times[1]);
            report.consistency_defect = Some(consistency_defect(model, teacher, &data, times, e.defect_samples, self.cfg.seed)?);
            report.endpoint_deviation = Some(endpoint_deviation(
                model,
                &EulerSchedule::new(steps)?,
                teacher,
                &EulerSchedule::new(e.reference_steps)?,
                &data,
                e.defect_samples,
                self.cfg.seed,
            )?);
        }
        Ok(report)
    }

    fn sweep_rows(&self, axis: &str, variant: &str, model: &VelocityNet, win_diff: Option<f64>) -> anyhow::Result<Vec<AblationRow>> {
        Ok(self
            .sweep(model)?
            .into_iter()
            .map(|r| AblationRow { axis: axis.into(), variant: variant.into(), seed: self.cfg.seed, steps: r.steps, frechet: r.frechet, win_diff })
            .collect())
    }

    /// Trains every variant of `axis` from `teacher` and sweeps each one.
    /// `t_sampler` and `objective` run distillation plus alignment; `lambda_rf`
    /// runs TA round 1 on `aligned` with and without the reflow term.
    pub fn ablate(&self, axis: &str, teacher: &VelocityNet, aligned: Option<&VelocityNet>) -> anyhow::Result<Vec<AblationRow>> {
        let mut rows = Vec::new();
        match axis {
            "t_sampler" => {
                let variants = [
                    ("uniform", TimestepSampler::uniform()),
                    ("lognorm(-0.8,1.0)", TimestepSampler::logit_normal(-0.8, 1.0)),
                    ("lognorm(-0.6,1.4)", TimestepSampler::logit_normal(-0.6, 1.4)),
                ];
                for (name, sampler) in variants {
                    let mut ccd = self.cfg.ccd.clone();
                    ccd.sampler = sampler;
                    let (state, _) = self.distill_ccd_with(teacher, &ccd)?;
                    let (state, _, _) = self.align_da_with(teacher, state, Objective::Continuous, &ccd, self.cfg.da.n_warmup)?;
                    rows.extend(self.sweep_rows(axis, name, &state.theta, None)?);
                }
            }
            "objective" => {
                let (ccd, _) = self.distill_ccd(teacher)?;
                let only = self.continue_ccd(teacher, ccd.clone())?;
                rows.extend(self.sweep_rows(axis, "ccd", &only.theta, None)?);
                let (da, _, _) = self.align_da(teacher, ccd, Objective::Continuous)?;
                rows.extend(self.sweep_rows(axis, "ccd+da", &da.theta, None)?);
                let (dcd, _) = self.distill_dcd(teacher)?;
                let (dcd_da, _, _) = self.align_da(teacher, dcd, Objective::Discrete { delta_t: self.cfg.dcd.delta_t })?;
                rows.extend(self.sweep_rows(axis, "dcd+da", &dcd_da.theta, None)?);
                let adv = self.adversarial_only(teacher)?;
                rows.extend(self.sweep_rows(axis, "da", &adv.theta, None)?);
            }
            "lambda_rf" => {
                let model = aligned.context("the lambda_rf axis needs an aligned model (run align-da first)")?;
                let prefs = self.synthesize(model, 1)?;
                for l in [self.cfg.ta.lambda_rf, 0.0] {
                    let (student, trace) = self.align_ta(model, &prefs, 1, Some(l))?;
                    rows.extend(self.sweep_rows(axis, &format!("lambda_rf={l}"), &student, Some(final_quartile_win_diff(&trace)))?);
                }
            }
            other => anyhow::bail!("unknown ablation axis {other:?}; expected one of {AXES:?}"),
        }
        Ok(rows)
    }
}

/// Mean Win Diff over the last quarter of a round.
pub fn final_quartile_win_diff(trace: &[TaTrace]) -> f64 {
    let start = trace.len() * 3 / 4;
    let tail = &trace[start..];
    tail.iter().map(|t| t.win_diff).sum::<f64>() / tail.len().max(1) as f64
}
