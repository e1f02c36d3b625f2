//! Pipeline stages backed by files in the output directory.

use std::path::PathBuf;

use anyhow::Context;
use serde::Serialize;

use flowdistill::ccd::Objective;
use flowdistill::dist_align::{DiscriminatorHeads, FeatureNet};
use flowdistill::numerics::{AdamW, Checkpoint, TrainState, VelocityNet};
use flowdistill::traj_align::preferences_to_checkpoint;

use crate::config::ExperimentConfig;
use crate::experiment::{final_quartile_win_diff, Workspace};
use crate::rundir::{ConfigError, RunDir};

#[derive(Clone, Debug, PartialEq)]
pub enum Stage {
    TrainTeacher,
    DistillCcd,
    DistillDcd,
    AlignDa,
    AlignTa { round: usize },
    Sample { steps: usize, n: usize, model: Option<String> },
    Eval { steps: usize, model: Option<String> },
    Sweep { model: Option<String> },
    Ablate { axis: String },
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::TrainTeacher => "train-teacher",
            Stage::DistillCcd => "distill-ccd",
            Stage::DistillDcd => "distill-dcd",
            Stage::AlignDa => "align-da",
            Stage::AlignTa { .. } => "align-ta",
            Stage::Sample { .. } => "sample",
            Stage::Eval { .. } => "eval",
            Stage::Sweep { .. } => "sweep",
            Stage::Ablate { .. } => "ablate",
        }
    }
}

pub const TEACHER: &str = "teacher.ckpt";
pub const CCD: &str = "ccd.ckpt";
pub const DCD: &str = "dcd.ckpt";
pub const DA: &str = "da.ckpt";

pub fn ta_file(round: usize) -> String {
    format!("ta_round{round}.ckpt")
}

/// Checkpoint file of a named model: `teacher`, `ccd`, `dcd`, `da` or `ta<k>`.
pub fn model_file(model: &str) -> anyhow::Result<String> {
    Ok(match model {
        "teacher" => TEACHER.into(),
        "ccd" => CCD.into(),
        "dcd" => DCD.into(),
        "da" => DA.into(),
        m => match m.strip_prefix("ta").and_then(|r| r.parse::<usize>().ok()) {
            Some(r) if r >= 1 => ta_file(r),
            _ => return Err(ConfigError(format!("unknown model {m:?}; expected teacher, ccd, dcd, da or ta<round>")).into()),
        },
    })
}

/// The most refined model present: the last TA round, else da, ccd, teacher.
fn latest_model(dir: &RunDir, cfg: &ExperimentConfig) -> String {
    let mut order: Vec<String> = (1..=cfg.ta.rounds.len()).rev().map(|r| format!("ta{r}")).collect();
    order.extend(["da", "ccd", "teacher"].map(String::from));
    order
        .into_iter()
        .find(|m| model_file(m).map(|f| dir.path(&f).is_file()).unwrap_or(false))
        .unwrap_or_else(|| "teacher".into())
}

fn load_net(dir: &RunDir, model: &str) -> anyhow::Result<VelocityNet> {
    let path = dir.require(&model_file(model)?)?;
    Ok(Checkpoint::load(&path)?.to_net()?)
}

fn load_state(dir: &RunDir, file: &str) -> anyhow::Result<TrainState> {
    let path = dir.require(file)?;
    Ok(Checkpoint::load(&path)?.to_train_state()?)
}

fn save(dir: &RunDir, name: &str, mut ck: Checkpoint, cfg: &ExperimentConfig) -> anyhow::Result<PathBuf> {
    ck.set_meta("seed", &cfg.seed)?;
    ck.set_meta("tool_version", &crate::config::TOOL_VERSION)?;
    dir.write_bytes(name, &ck.to_bytes()?)
}

fn heads_checkpoint(state: &TrainState, heads: &DiscriminatorHeads, fnet: &FeatureNet) -> anyhow::Result<Checkpoint> {
    let mut ck = Checkpoint::from_train_state("da", state)?;
    ck.push_params("heads", heads.params());
    ck.push_params("heads_m", &heads.adamw.m);
    ck.push_params("heads_v", &heads.adamw.v);
    ck.set_meta("heads_step", &heads.adamw.step)?;
    ck.set_meta("frames", &heads.frames())?;
    ck.set_meta("disc_features_fingerprint", &format!("{:016x}", fnet.fingerprint()))?;
    Ok(ck)
}

/// Restores the discriminator saved next to a DA state.
pub fn heads_from_checkpoint(ck: &Checkpoint) -> anyhow::Result<DiscriminatorHeads> {
    let adamw = AdamW { m: ck.params("heads_m"), v: ck.params("heads_v"), step: ck.meta("heads_step")? };
    Ok(DiscriminatorHeads::from_params(ck.meta("frames")?, ck.params("heads"), adamw)?)
}

#[derive(Serialize)]
struct SweepSummary<'a, T> {
    model: &'a str,
    seed: u64,
    reports: &'a [T],
}

/// Runs one stage and returns the files it wrote.
pub fn run_stage(stage: &Stage, cfg: &ExperimentConfig, force: bool) -> anyhow::Result<Vec<PathBuf>> {
    let dir = RunDir::open(&cfg.output_dir, force)?;
    let resolved = dir.path("config.toml");
    if !resolved.exists() {
        dir.write_bytes("config.toml", cfg.to_toml().as_bytes())?;
    }
    let mut out = Vec::new();
    match stage {
        Stage::TrainTeacher => {
            dir.claim(&[TEACHER, "teacher_metrics.csv"])?;
            let ws = Workspace::new(cfg.clone())?;
            let (net, rows) = ws.train_teacher()?;
            out.push(save(&dir, TEACHER, Checkpoint::from_net("teacher", &net)?, cfg)?);
            out.push(dir.write_csv("teacher_metrics.csv", &rows)?);
        }
        Stage::DistillCcd => {
            let teacher = load_net(&dir, "teacher")?;
            dir.claim(&[CCD, "ccd_metrics.csv"])?;
            let ws = Workspace::new(cfg.clone())?;
            let (state, trace) = ws.distill_ccd(&teacher)?;
            out.push(save(&dir, CCD, Checkpoint::from_train_state("ccd", &state)?, cfg)?);
            out.push(dir.write_csv("ccd_metrics.csv", &trace)?);
        }
        Stage::DistillDcd => {
            let teacher = load_net(&dir, "teacher")?;
            dir.claim(&[DCD, "dcd_metrics.csv"])?;
            let ws = Workspace::new(cfg.clone())?;
            let (state, rows) = ws.distill_dcd(&teacher)?;
            out.push(save(&dir, DCD, Checkpoint::from_train_state("dcd", &state)?, cfg)?);
            out.push(dir.write_csv("dcd_metrics.csv", &rows)?);
        }
        Stage::AlignDa => {
            let teacher = load_net(&dir, "teacher")?;
            let state = load_state(&dir, CCD)?;
            dir.claim(&[DA, "da_metrics.csv"])?;
            let ws = Workspace::new(cfg.clone())?;
            let (state, heads, trace) = ws.align_da(&teacher, state, Objective::Continuous)?;
            let ck = heads_checkpoint(&state, &heads, &ws.disc_features()?)?;
            out.push(save(&dir, DA, ck, cfg)?);
            out.push(dir.write_csv("da_metrics.csv", &trace)?);
        }
        Stage::AlignTa { round } => {
            let round = *round;
            cfg.ta_config(round).map_err(|e| ConfigError(e.to_string()))?;
            let prev = if round == 1 { "da".to_string() } else { format!("ta{}", round - 1) };
            let model = load_net(&dir, &prev)?;
            let prefs_file = format!("preferences_round{round}.ckpt");
            let metrics = format!("ta_round{round}_metrics.csv");
            let ta = ta_file(round);
            dir.claim(&[&prefs_file, &ta, &metrics])?;
            let ws = Workspace::new(cfg.clone())?;
            let prefs = ws.synthesize(&model, round)?;
            out.push(save(&dir, &prefs_file, preferences_to_checkpoint(&prefs)?, cfg)?);
            let (student, trace) = ws.align_ta(&model, &prefs, round, None)?;
            let mut ck = Checkpoint::from_net("ta", &student)?;
            ck.set_meta("round", &round)?;
            ck.set_meta("final_quartile_win_diff", &final_quartile_win_diff(&trace))?;
            out.push(save(&dir, &ta, ck, cfg)?);
            out.push(dir.write_csv(&metrics, &trace)?);
        }
        Stage::Sample { steps, n, model } => {
            let model = model.clone().unwrap_or_else(|| latest_model(&dir, cfg));
            let net = load_net(&dir, &model)?;
            let name = format!("samples_{model}_steps{steps}_n{n}.csv");
            dir.claim(&[&name])?;
            let ws = Workspace::new(cfg.clone())?;
            let samples = ws.sample(&net, *steps, *n)?;
            out.push(write_samples(&dir, &name, &samples)?);
        }
        Stage::Eval { steps, model } => {
            let model = model.clone().unwrap_or_else(|| latest_model(&dir, cfg));
            let net = load_net(&dir, &model)?;
            let teacher = if dir.path(TEACHER).is_file() { Some(load_net(&dir, "teacher")?) } else { None };
            let stem = format!("eval_{model}_steps{steps}");
            dir.claim(&[&format!("{stem}.csv"), &format!("{stem}.json")])?;
            let ws = Workspace::new(cfg.clone())?;
            let report = ws.evaluate(&net, teacher.as_ref(), *steps)?;
            out.push(dir.write_csv(&format!("{stem}.csv"), std::slice::from_ref(&report))?);
            out.push(dir.write_json(&format!("{stem}.json"), &report)?);
        }
        Stage::Sweep { model } => {
            let model = model.clone().unwrap_or_else(|| latest_model(&dir, cfg));
            let net = load_net(&dir, &model)?;
            let stem = format!("sweep_{model}");
            dir.claim(&[&format!("{stem}.csv"), &format!("{stem}.json")])?;
            let ws = Workspace::new(cfg.clone())?;
            let reports = ws.sweep(&net)?;
            out.push(dir.write_csv(&format!("{stem}.csv"), &reports)?);
            out.push(dir.write_json(&format!("{stem}.json"), &SweepSummary { model: &model, seed: cfg.seed, reports: &reports })?);
        }
        Stage::Ablate { axis } => {
            if !crate::experiment::AXES.contains(&axis.as_str()) {
                return Err(ConfigError(format!("unknown ablation axis {axis:?}; expected one of {:?}", crate::experiment::AXES)).into());
            }
            let teacher = load_net(&dir, "teacher")?;
            let aligned = if axis == "lambda_rf" { Some(load_net(&dir, "da")?) } else { None };
            let stem = format!("ablate_{axis}");
            dir.claim(&[&format!("{stem}.csv"), &format!("{stem}.json")])?;
            let ws = Workspace::new(cfg.clone())?;
            let rows = ws.ablate(axis, &teacher, aligned.as_ref())?;
            out.push(dir.write_csv(&format!("{stem}.csv"), &rows)?);
            out.push(dir.write_json(&format!("{stem}.json"), &rows)?);
        }
    }
    Ok(out)
}

fn write_samples(dir: &RunDir, name: &str, samples: &[flowdistill::numerics::Tensor]) -> anyhow::Result<PathBuf> {
    let path = dir.path(name);
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    let len = samples.first().map_or(0, |s| s.data().len());
    let mut header = vec!["index".to_string()];
    header.extend((0..len).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    for (i, s) in samples.iter().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(s.data().iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(path)
}
