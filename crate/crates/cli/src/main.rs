use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use flowdistill_cli::config::{env_overrides, schema, ExperimentConfig};
use flowdistill_cli::export::export_plotdata;
use flowdistill_cli::rundir::{ConfigError, MissingPrerequisite};
use flowdistill_cli::{run_stage, Stage};

#[derive(Parser)]
#[command(name = "flowdistill", version, about = "Few-step distillation experiments on toy sequence data")]
struct Cli {
    /// TOML config; the built-in default is used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed, overriding `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads for sampling and evaluation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the flow-matching teacher.
    TrainTeacher,
    /// Continuous-time consistency distillation from the teacher.
    DistillCcd,
    /// Discrete-time consistency distillation baseline.
    DistillDcd,
    /// Adversarial distribution alignment on top of the CCD student.
    AlignDa,
    /// One round of preference-based trajectory alignment.
    AlignTa {
        #[arg(long, default_value_t = 1)]
        round: usize,
    },
    /// Draw samples with a fixed number of Euler steps.
    Sample {
        #[arg(long, default_value_t = 4)]
        steps: usize,
        #[arg(long, default_value_t = 16)]
        n: usize,
        /// teacher, ccd, dcd, da or ta<round>; defaults to the latest stage present.
        #[arg(long)]
        model: Option<String>,
    },
    /// Fréchet score, consistency defect and endpoint deviation at one step count.
    Eval {
        #[arg(long, default_value_t = 4)]
        steps: usize,
        #[arg(long)]
        model: Option<String>,
    },
    /// Fréchet score over `eval.steps_list`.
    Sweep {
        #[arg(long)]
        model: Option<String>,
    },
    /// Retrain the variants of one design axis and sweep each.
    Ablate {
        /// t_sampler, objective or lambda_rf.
        #[arg(long)]
        axis: String,
    },
    /// Long-format plot tables from the run directory.
    Export,
    /// Print every config key with its type and default, or the default file with --toml.
    Schema {
        #[arg(long)]
        toml: bool,
    },
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut overrides = env_overrides();
    if let Some(s) = cli.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    if let Some(o) = &cli.out {
        overrides.push(("output_dir".into(), format!("{:?}", o.display().to_string())));
    }
    let result = match &cli.config {
        Some(p) => ExperimentConfig::load(p, &overrides),
        None => ExperimentConfig::parse(&ExperimentConfig::default().to_toml(), &overrides),
    };
    result.map_err(|e| ConfigError(format!("{e:#}")).into())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| ConfigError(format!("--threads: {e}")))?;
    }
    let stage = match &cli.cmd {
        Cmd::Schema { toml } => {
            if *toml {
                print!("{}", ExperimentConfig::default().to_toml());
            } else {
                print!("{}", schema());
            }
            return Ok(());
        }
        Cmd::Export => {
            let cfg = load_config(&cli)?;
            for p in export_plotdata(&cfg.output_dir)? {
                println!("{}", p.display());
            }
            return Ok(());
        }
        Cmd::TrainTeacher => Stage::TrainTeacher,
        Cmd::DistillCcd => Stage::DistillCcd,
        Cmd::DistillDcd => Stage::DistillDcd,
        Cmd::AlignDa => Stage::AlignDa,
        Cmd::AlignTa { round } => Stage::AlignTa { round: *round },
        Cmd::Sample { steps, n, model } => Stage::Sample { steps: *steps, n: *n, model: model.clone() },
        Cmd::Eval { steps, model } => Stage::Eval { steps: *steps, model: model.clone() },
        Cmd::Sweep { model } => Stage::Sweep { model: model.clone() },
        Cmd::Ablate { axis } => Stage::Ablate { axis: axis.clone() },
    };
    let cfg = load_config(&cli)?;
    for p in run_stage(&stage, &cfg, cli.force)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    if err.downcast_ref::<MissingPrerequisite>().is_some() {
        return 3;
    }
    let numerical = err.chain().any(|e| e.downcast_ref::<flowdistill::Error>().is_some_and(|e| e.is_numerical()));
    if numerical {
        4
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
