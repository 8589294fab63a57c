//! Experiment configuration, seed plumbing, the parameter-variation grid and
//! summary CSV emission.
//!
//! Seed scheme: every consumer derives its stream from the master seed and a
//! fixed label (see [`crate::seeds`]). The system generator uses the master
//! seed directly with its own `system/*` labels; training uses
//! `derive_seed(master, "train")` and evaluation `derive_seed(master, "evaluate")`.

use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::env::{EnvConfig, EnvParams};
use crate::error::{Error, Result};
use crate::link_energy::LinkBudget;
use crate::linmodel::{generate_system, GenerationConfig};
use crate::scheduling::{evaluate, EvalSummary, PolicySpec, PpoConfig};
use crate::seeds::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub seed: u64,
    /// Evaluation episodes per policy and variation.
    pub n_runs: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            seed: 2024,
            n_runs: 200,
            output_dir: PathBuf::from("results"),
        }
    }
}

/// The whole experiment in one file; every section and key is optional and
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub system: GenerationConfig,
    pub link: LinkBudget,
    pub env: EnvParams,
    pub ppo: PpoConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        self.link.validate()?;
        self.env.validate()?;
        self.ppo.validate()?;
        if self.experiment.n_runs == 0 {
            return Err(Error::Config("experiment.n_runs must be at least 1".into()));
        }
        Ok(())
    }

    /// Parses TOML, applies `section.key=value` overrides (values in TOML
    /// syntax; bare words are taken as strings), then validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn train_seed(&self) -> u64 {
        derive_seed(self.experiment.seed, "train")
    }

    pub fn eval_seed(&self) -> u64 {
        derive_seed(self.experiment.seed, "evaluate")
    }

    /// Generates the system under `variation` and wraps it in an environment
    /// configuration.
    pub fn env_config(&self, variation: Variation) -> Result<Arc<EnvConfig>> {
        let gen = variation.apply(&self.system);
        let (model, sensors) = generate_system(self.experiment.seed, &gen)?;
        Ok(Arc::new(EnvConfig::new(model, sensors, &self.link, self.env.clone())?))
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override `{spec}` is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {}", raw.trim())) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let (last, parents) = keys.split_last().expect("split yields one part");
    let mut cur = table;
    for k in parents {
        cur = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Usage(format!("override `{spec}`: `{k}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// One column of the robustness table: the reference ranges or one range
/// replaced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variation {
    Standard,
    /// Sampling probabilities ~ U(0.1, 0.3).
    ProbLow,
    /// Sampling probabilities ~ U(0.7, 0.9).
    ProbHigh,
    /// Process-noise factor entries ~ U(0, 0.1).
    ProcessNoiseLow,
    /// Process-noise factor entries ~ U(1, 10).
    ProcessNoiseHigh,
    /// Measurement-noise factor entries ~ U(0, 0.1).
    MeasNoiseLow,
    /// Measurement-noise factor entries ~ U(1, 10).
    MeasNoiseHigh,
}

impl Variation {
    pub const ALL: [Variation; 7] = [
        Variation::Standard,
        Variation::ProbLow,
        Variation::ProbHigh,
        Variation::ProcessNoiseLow,
        Variation::ProcessNoiseHigh,
        Variation::MeasNoiseLow,
        Variation::MeasNoiseHigh,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variation::Standard => "standard",
            Variation::ProbLow => "p~U(0.1,0.3)",
            Variation::ProbHigh => "p~U(0.7,0.9)",
            Variation::ProcessNoiseLow => "q~U(0,0.1)",
            Variation::ProcessNoiseHigh => "q~U(1,10)",
            Variation::MeasNoiseLow => "r~U(0,0.1)",
            Variation::MeasNoiseHigh => "r~U(1,10)",
        }
    }

    pub fn apply(self, base: &GenerationConfig) -> GenerationConfig {
        let mut g = base.clone();
        match self {
            Variation::Standard => {}
            Variation::ProbLow => g.sample_prob_range = [0.1, 0.3],
            Variation::ProbHigh => g.sample_prob_range = [0.7, 0.9],
            Variation::ProcessNoiseLow => g.q_range = [0.0, 0.1],
            Variation::ProcessNoiseHigh => g.q_range = [1.0, 10.0],
            Variation::MeasNoiseLow => g.r_range = [0.0, 0.1],
            Variation::MeasNoiseHigh => g.r_range = [1.0, 10.0],
        }
        g
    }
}

impl fmt::Display for Variation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variation::ALL
            .into_iter()
            .find(|v| v.label() == s)
            .ok_or_else(|| Error::Usage(format!("unknown variation `{s}`")))
    }
}

/// One line of a summary CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub policy: String,
    pub variation: String,
    pub mean_objective: f64,
    pub std_objective: f64,
    pub mean_trace_final: f64,
    pub mean_energy_total: f64,
    pub n_runs: usize,
    pub seed: u64,
}

impl SummaryRow {
    pub fn new(summary: &EvalSummary, variation: Variation) -> Self {
        Self {
            policy: summary.policy.clone(),
            variation: variation.label().to_string(),
            mean_objective: summary.mean_objective,
            std_objective: summary.std_objective,
            mean_trace_final: summary.mean_trace_final,
            mean_energy_total: summary.mean_energy_total,
            n_runs: summary.n_runs,
            seed: summary.seed,
        }
    }
}

/// Writes the rows with a header. Floats use the shortest representation
/// that reads back to the same value.
pub fn emit_summary<W: Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Usage("no completed runs to summarize".into()));
    }
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary<R: Read>(input: R) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

/// Evaluates each policy under each variation with paired seeds. Rows come
/// out variation-major in the order given.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    policies: &[PolicySpec],
    variations: &[Variation],
) -> Result<Vec<(Variation, EvalSummary)>> {
    let mut out = Vec::with_capacity(policies.len() * variations.len());
    for &v in variations {
        let env_cfg = cfg.env_config(v)?;
        for p in policies {
            log::info!("evaluating {} under {}", p.name(), v);
            out.push((v, evaluate(&env_cfg, p, cfg.experiment.n_runs, cfg.eval_seed())?));
        }
    }
    Ok(out)
}

/// Named process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ExitCode {
    Success = 0,
    Failure = 1,
    Usage = 2,
    Config = 3,
    MissingCheckpoint = 4,
    Io = 5,
    Training = 6,
    Infeasible = 7,
}

impl ExitCode {
    pub fn for_error(e: &Error) -> Self {
        match e {
            Error::Config(_) => ExitCode::Config,
            Error::Usage(_) => ExitCode::Usage,
            Error::Io(_) | Error::Csv(_) => ExitCode::Io,
            Error::Training(_) => ExitCode::Training,
            Error::Parse(_) | Error::Filter(_) | Error::StaleMeasurement { .. } => ExitCode::Failure,
        }
    }
}
