use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use gradecast::eval::{RiskRule, AT_RISK_THRESHOLD};
use gradecast::models::{Family, HyperGrid};
use gradecast::pipeline::PipelineConfig;
use gradecast::uncertainty::DEFAULT_SAMPLES;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "gradecast",
    version,
    about = "Next-term grade prediction with uncertainty and prior-course influence"
)]
pub struct Cli {
    /// JSON run configuration; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Base random seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with planted structure.
    Synth(SynthArgs),
    /// Train every model family for every catalog target.
    Train(TrainArgs),
    /// Test-split metric tables per family.
    Evaluate(EvaluateArgs),
    /// Predictive distribution for one student and target course.
    Predict(PredictArgs),
    /// Prior-course influence for one student, or collectively for a course.
    Explain(ExplainArgs),
    /// Calibration, error-at-k and risk-confidence curves as CSV.
    Calibrate(CalibrateArgs),
    /// Start the HTTP service over a model registry.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Generator preset.
    #[arg(long, default_value = "bench-small")]
    pub spec: String,
    /// Output data directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Model registry directory.
    #[arg(long)]
    pub models: Option<PathBuf>,
    /// Hyperparameter grid preset: desk, paper or bench.
    #[arg(long)]
    pub grid: Option<String>,
    /// Maximum number of target courses trained concurrently.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Test term index (defaults to each target's last labelled term).
    #[arg(long)]
    pub test_term: Option<u32>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    /// MC samples used when tuning tau_inv.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Comma-separated family labels to train.
    #[arg(long, value_delimiter = ',')]
    pub families: Option<Vec<Family>>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub models: Option<PathBuf>,
    /// Output directory for the tables.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Test term: `last` or a term index.
    #[arg(long, default_value = "last")]
    pub term: String,
    /// Count a grade of exactly 2.0 as at risk.
    #[arg(long)]
    pub at_risk_inclusive: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub models: Option<PathBuf>,
    /// JSON request file in the service's `/predict` format.
    #[arg(long, conflicts_with_all = ["student", "course"])]
    pub request: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, requires = "course")]
    pub student: Option<String>,
    #[arg(long, requires = "student")]
    pub course: Option<String>,
    #[arg(long)]
    pub family: Option<Family>,
    #[arg(long)]
    pub level: Option<f64>,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Write the JSON here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub models: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// JSON request file in the service's `/explain` format.
    #[arg(long, conflicts_with_all = ["student", "course"])]
    pub request: Option<PathBuf>,
    /// Student to explain; omit for the collective influence table.
    #[arg(long)]
    pub student: Option<String>,
    #[arg(long)]
    pub course: Option<String>,
    #[arg(long, default_value_t = 5)]
    pub top: usize,
    #[arg(long)]
    pub family: Option<Family>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub models: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "MLP")]
    pub family: Family,
    #[arg(long, default_value = "last")]
    pub term: String,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub at_risk_inclusive: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub models: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
}

/// Settings readable from a `--config` file. Every field is optional.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub models: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub grid: Option<String>,
    pub samples: Option<usize>,
    pub tau_grid: Option<Vec<f64>>,
    pub test_term: Option<u32>,
    pub at_risk_inclusive: Option<bool>,
    pub max_iterations: Option<usize>,
    pub jobs: Option<usize>,
}

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_GRID: &str = "desk";

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.seed).unwrap_or(DEFAULT_SEED)
    }

    pub fn data(&self, flag: Option<PathBuf>) -> PathBuf {
        flag.or_else(|| self.data.clone()).unwrap_or_else(|| PathBuf::from("data"))
    }

    pub fn models(&self, flag: Option<PathBuf>) -> PathBuf {
        flag.or_else(|| self.models.clone()).unwrap_or_else(|| PathBuf::from("models"))
    }

    pub fn out(&self, flag: Option<PathBuf>, fallback: &str) -> PathBuf {
        flag.or_else(|| self.out.clone()).unwrap_or_else(|| PathBuf::from(fallback))
    }

    pub fn samples(&self, flag: Option<usize>) -> usize {
        flag.or(self.samples).unwrap_or(DEFAULT_SAMPLES)
    }

    pub fn risk_rule(&self, flag: bool) -> RiskRule {
        RiskRule {
            threshold: AT_RISK_THRESHOLD,
            inclusive: flag || self.at_risk_inclusive.unwrap_or(false),
        }
    }

    /// Pipeline configuration for `train`, with its grid preset name.
    pub fn pipeline(&self, args: &TrainArgs, seed: u64) -> CliResult<(PipelineConfig, String)> {
        let grid_name = args
            .grid
            .clone()
            .or_else(|| self.grid.clone())
            .unwrap_or_else(|| DEFAULT_GRID.into());
        let mut cfg = PipelineConfig {
            grid: HyperGrid::preset(&grid_name)?,
            seed,
            test_term: args.test_term.or(self.test_term),
            mc_samples: self.samples(args.samples),
            risk_rule: self.risk_rule(false),
            ..PipelineConfig::default()
        };
        if let Some(t) = &self.tau_grid {
            cfg.tau_grid = t.clone();
        }
        if let Some(m) = args.max_iterations.or(self.max_iterations) {
            cfg.train.max_iterations = m;
        }
        if let Some(f) = &args.families {
            cfg.families = Family::ALL.into_iter().filter(|x| f.contains(x)).collect();
        }
        if cfg.mc_samples < 2 {
            return Err(CliError::usage("at least 2 MC samples are required"));
        }
        Ok((cfg, grid_name))
    }
}

/// `last` or a term index.
pub fn parse_term(token: &str) -> CliResult<Option<u32>> {
    if token == "last" {
        return Ok(None);
    }
    token
        .parse()
        .map(Some)
        .map_err(|_| CliError::usage(format!("term must be `last` or a term index, got `{token}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn term_tokens() {
        assert_eq!(parse_term("last").unwrap(), None);
        assert_eq!(parse_term("7").unwrap(), Some(7));
        assert!(parse_term("soon").is_err());
    }

    #[test]
    fn flags_override_config_values() {
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 3, "samples": 40, "grid": "bench"}"#).unwrap();
        assert_eq!(cfg.seed(None), 3);
        assert_eq!(cfg.seed(Some(9)), 9);
        assert_eq!(cfg.samples(None), 40);
        assert_eq!(RunConfig::default().seed(None), DEFAULT_SEED);
        assert!(serde_json::from_str::<RunConfig>(r#"{"sead": 3}"#).is_err());
    }

    #[test]
    fn pipeline_settings_follow_flags() {
        let cfg: RunConfig = serde_json::from_str(r#"{"grid": "bench", "max_iterations": 100}"#).unwrap();
        let args = TrainArgs {
            data: None,
            models: None,
            grid: None,
            jobs: None,
            test_term: Some(5),
            max_iterations: None,
            samples: Some(1),
            families: Some(vec![Family::Lstm, Family::BiasOnly]),
        };
        assert!(cfg.pipeline(&args, 1).is_err());
        let args = TrainArgs { samples: None, ..args };
        let (p, grid) = cfg.pipeline(&args, 1).unwrap();
        assert_eq!(grid, "bench");
        assert_eq!(p.train.max_iterations, 100);
        assert_eq!(p.test_term, Some(5));
        assert_eq!(p.families, vec![Family::BiasOnly, Family::Lstm]);
    }
}
