//! Long-format plot tables derived from a run directory's metric files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use flowdistill::metrics::MetricReport;

use crate::rundir::write_csv;

pub const PLOT_DIR: &str = "plot";

#[derive(Serialize)]
struct SweepRow<'a> {
    model: &'a str,
    seed: u64,
    steps: usize,
    frechet: f64,
}

#[derive(Deserialize)]
struct TaRow {
    iter: u64,
    win_diff: f64,
}

#[derive(Serialize)]
struct WinDiffRow {
    round: usize,
    iter: u64,
    win_diff: f64,
}

#[derive(Serialize)]
struct CurveRow<'a> {
    stage: &'a str,
    iter: u64,
    series: &'a str,
    value: f64,
}

fn files_matching(dir: &Path, prefix: &str, suffix: &str) -> anyhow::Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        if let Some(stem) = name.strip_prefix(prefix).and_then(|n| n.strip_suffix(suffix)) {
            out.insert(stem.to_string(), path.clone());
        }
    }
    Ok(out)
}

/// Writes `plot/step_sweep.csv`, `plot/win_diff.csv` and `plot/loss_curves.csv`.
/// Tables are rebuilt from scratch each time, so re-export is idempotent.
pub fn export_plotdata(run_dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if !run_dir.is_dir() {
        bail!("{} is not a run directory", run_dir.display());
    }
    let sweeps = files_matching(run_dir, "sweep_", ".csv")?;
    let rounds = files_matching(run_dir, "ta_round", "_metrics.csv")?;
    let metrics = files_matching(run_dir, "", "_metrics.csv")?;
    if sweeps.is_empty() && metrics.is_empty() {
        bail!("{} has no metrics to export", run_dir.display());
    }
    let plot = run_dir.join(PLOT_DIR);
    fs::create_dir_all(&plot)?;
    let mut written = Vec::new();

    let mut sweep_rows = Vec::new();
    let mut reports: Vec<(String, Vec<MetricReport>)> = Vec::new();
    for (model, path) in &sweeps {
        let rows = csv::Reader::from_path(path)?.deserialize().collect::<Result<Vec<MetricReport>, _>>()?;
        reports.push((model.clone(), rows));
    }
    for (model, rows) in &reports {
        for r in rows {
            sweep_rows.push(SweepRow { model, seed: r.seed, steps: r.steps, frechet: r.frechet });
        }
    }
    let p = plot.join("step_sweep.csv");
    write_csv(&p, &sweep_rows)?;
    written.push(p);

    let mut wd = Vec::new();
    for (round, path) in &rounds {
        let round: usize = round.parse().with_context(|| format!("round index in {}", path.display()))?;
        for r in csv::Reader::from_path(path)?.deserialize::<TaRow>() {
            let r = r?;
            wd.push(WinDiffRow { round, iter: r.iter, win_diff: r.win_diff });
        }
    }
    let p = plot.join("win_diff.csv");
    write_csv(&p, &wd)?;
    written.push(p);

    // every numeric column other than `iter` becomes a series
    let mut curves: Vec<(String, u64, String, f64)> = Vec::new();
    for (stage, path) in &metrics {
        let mut rdr = csv::Reader::from_path(path)?;
        let headers = rdr.headers()?.clone();
        let iter_col = headers.iter().position(|h| h == "iter").with_context(|| format!("{} has no iter column", path.display()))?;
        for rec in rdr.records() {
            let rec = rec?;
            let iter: u64 = rec[iter_col].parse()?;
            for (j, h) in headers.iter().enumerate() {
                if j == iter_col {
                    continue;
                }
                if let Ok(v) = rec[j].parse::<f64>() {
                    curves.push((stage.clone(), iter, h.to_string(), v));
                }
            }
        }
    }
    let rows: Vec<CurveRow> = curves.iter().map(|(s, i, k, v)| CurveRow { stage: s, iter: *i, series: k, value: *v }).collect();
    let p = plot.join("loss_curves.csv");
    write_csv(&p, &rows)?;
    written.push(p);
    Ok(written)
}
