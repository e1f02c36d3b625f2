//! Experiment configuration: a TOML file with typed sections, environment
//! overrides, and a printable key listing.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use flowdistill::ccd::CcdConfig;
use flowdistill::dist_align::DaConfig;
use flowdistill::flow::{DatasetSpec, TeacherConfig, TimestepSampler};
use flowdistill::numerics::NetConfig;
use flowdistill::traj_align::TaConfig;

/// Environment variables `FLOWDISTILL_<SECTION>__<KEY>=<toml value>` override
/// config keys; top-level keys drop the section (`FLOWDISTILL_SEED=3`).
pub const ENV_PREFIX: &str = "FLOWDISTILL_";

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub data: DataSizes,
    pub net: NetSection,
    pub teacher: TeacherConfig,
    pub ccd: CcdConfig,
    pub dcd: DcdSection,
    pub da: DaSection,
    pub ta: TaSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSizes {
    pub train: usize,
    pub eval: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSection {
    pub width: usize,
    pub blocks: usize,
    pub time_freqs: usize,
    pub max_freq: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DcdSection {
    pub delta_t: f64,
}

/// Alignment runs `iters` further iterations on top of the distilled state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DaSection {
    pub iters: u64,
    pub lambda_adv: f64,
    pub n_warmup: u64,
    pub disc_lr: f64,
    pub disc_hidden: usize,
    pub features: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaSection {
    pub beta: f64,
    pub lambda_rf: f64,
    pub lr: f64,
    pub iters: u64,
    pub batch: usize,
    pub dataset_size: usize,
    pub sampler: TimestepSampler,
    /// `[preferred, other]` step counts, one entry per round.
    pub rounds: Vec<[usize; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub steps_list: Vec<usize>,
    /// Seed of the frozen evaluation features, independent of the run seed.
    pub feature_seed: u64,
    pub defect_times: [f64; 2],
    pub defect_samples: usize,
    pub reference_steps: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let sampler = TimestepSampler::uniform();
        let mut ccd = CcdConfig::new(1e-5, 1000);
        ccd.sampler = sampler;
        ExperimentConfig {
            version: TOOL_VERSION.into(),
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            dataset: DatasetSpec::default_mixture(7),
            data: DataSizes { train: 4096, eval: 2000 },
            net: NetSection { width: 64, blocks: 2, time_freqs: 16, max_freq: 16.0 },
            teacher: TeacherConfig { iters: 4000, lr: 2e-3, lr_final: 1e-4, batch: 64, sampler: TimestepSampler::uniform() },
            ccd,
            dcd: DcdSection { delta_t: 0.05 },
            da: DaSection { iters: 1000, lambda_adv: 0.1, n_warmup: 1000, disc_lr: 1e-3, disc_hidden: 32, features: 32 },
            ta: TaSection {
                beta: 2500.0,
                lambda_rf: 2.0,
                lr: 1e-5,
                iters: 4000,
                batch: 32,
                dataset_size: 5000,
                sampler,
                rounds: vec![[8, 4], [4, 2]],
            },
            eval: EvalSection {
                steps_list: vec![1, 2, 4, 8],
                feature_seed: 7,
                defect_times: [0.3, 0.9],
                defect_samples: 256,
                reference_steps: 1024,
            },
        }
    }
}

impl ExperimentConfig {
    pub fn net_config(&self) -> NetConfig {
        let [frames, dim] = self.dataset.sample_shape();
        let mut nc = NetConfig::new(frames * dim, dim, self.net.width, self.net.blocks);
        nc.time_freqs = self.net.time_freqs;
        nc.max_freq = self.net.max_freq;
        nc
    }

    pub fn da_config(&self) -> DaConfig {
        DaConfig {
            lambda_adv: self.da.lambda_adv,
            n_warmup: self.da.n_warmup,
            disc_lr: self.da.disc_lr,
            disc_hidden: self.da.disc_hidden,
        }
    }

    /// Config of TA round `round` (1-based).
    pub fn ta_config(&self, round: usize) -> anyhow::Result<TaConfig> {
        let Some(&[w, l]) = round.checked_sub(1).and_then(|r| self.ta.rounds.get(r)) else {
            bail!("round {round} is not configured; ta.rounds has {} entries", self.ta.rounds.len());
        };
        Ok(TaConfig {
            beta: self.ta.beta,
            lambda_rf: self.ta.lambda_rf,
            steps_w: w,
            steps_l: l,
            dataset_size: self.ta.dataset_size,
            lr: self.ta.lr,
            iters: self.ta.iters,
            batch: self.ta.batch,
            sampler: self.ta.sampler,
        })
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.version != TOOL_VERSION {
            bail!("config version {} does not match tool version {TOOL_VERSION}", self.version);
        }
        self.dataset.validate()?;
        self.net_config().validate()?;
        self.teacher.validate()?;
        self.ccd.validate()?;
        self.da_config().validate()?;
        if self.data.train == 0 || self.data.eval < 2 {
            bail!("data.train must be positive and data.eval at least 2");
        }
        if self.da.features == 0 {
            bail!("da.features must be positive");
        }
        flowdistill::ccd::Objective::Discrete { delta_t: self.dcd.delta_t }.validate()?;
        if self.ta.rounds.is_empty() {
            bail!("ta.rounds must list at least one round");
        }
        for r in 1..=self.ta.rounds.len() {
            self.ta_config(r)?.validate()?;
        }
        let s = &self.eval.steps_list;
        if s.is_empty() || s.windows(2).any(|w| w[0] >= w[1]) || s[0] == 0 {
            bail!("eval.steps_list must be non-empty, positive and ascending, got {s:?}");
        }
        let [t1, t2] = self.eval.defect_times;
        if !(0.0 <= t1 && t1 <= t2 && t2 <= 1.0) {
            bail!("eval.defect_times must satisfy 0 <= t1 <= t2 <= 1");
        }
        if self.eval.defect_samples == 0 || self.eval.reference_steps == 0 {
            bail!("eval.defect_samples and eval.reference_steps must be positive");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Parses `text`, applies `overrides` (dotted key, raw value), and validates.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> anyhow::Result<Self> {
        let mut table: toml::Table = text.parse().context("config is not valid TOML")?;
        for (key, raw) in overrides {
            set_key(&mut table, key, raw)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| {
            anyhow::anyhow!("invalid config: {}", e.message())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text, overrides)
    }
}

/// Overrides from the process environment, sorted by key.
pub fn env_overrides() -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = std::env::vars()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            Some((rest.to_ascii_lowercase().replace("__", "."), v))
        })
        .collect();
    out.sort();
    out
}

fn set_key(table: &mut toml::Table, dotted: &str, raw: &str) -> anyhow::Result<()> {
    let value: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = dotted.split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in path {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().with_context(|| format!("override {dotted}: {p} is not a section"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// `key  type  default` for every leaf of the default config.
pub fn schema() -> String {
    let value = toml::Value::try_from(ExperimentConfig::default()).expect("config serializes");
    let mut rows = Vec::new();
    walk("", &value, &mut rows);
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
    let mut out = format!("# keys of ExperimentConfig; override with {ENV_PREFIX}<SECTION>__<KEY>\n");
    for (k, ty, v) in rows {
        out.push_str(&format!("{k:width$}  {ty:8}  {v}\n"));
    }
    out
}

fn walk(prefix: &str, v: &toml::Value, rows: &mut Vec<(String, &'static str, String)>) {
    match v {
        toml::Value::Table(t) => {
            for (k, sub) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                walk(&key, sub, rows);
            }
        }
        other => {
            let ty = match other {
                toml::Value::String(_) => "string",
                toml::Value::Integer(_) => "integer",
                toml::Value::Float(_) => "float",
                toml::Value::Boolean(_) => "bool",
                toml::Value::Array(_) => "array",
                _ => "other",
            };
            rows.push((prefix.to_string(), ty, other.to_string()));
        }
    }
}
