//! Run configuration: one TOML file with a section per module.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use slfr::data::{BinarizeRule, Format, Schema};
use slfr::synth::SynthConfig;
use slfr::train::TrainConfig;
use slfr::vae::VaeConfig;

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Copied into every section's seed when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub data: DataConfig,
    pub vae: VaeConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
    pub sweep: SweepConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format: Option<Format>,
    pub rule: BinarizeRule,
    pub schema: Schema,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            input: None,
            format: None,
            rule: BinarizeRule::RatingGe4,
            schema: Schema::default(),
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// `heldout`, `valid`, or a path to a `user,item` label file.
    pub labels: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: slfr::eval::DEFAULT_KS.to_vec(),
            labels: "heldout".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Gamma,
    Alpha,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub param: SweepParam,
    pub grid: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            param: SweepParam::Gamma,
            grid: (0..=10).map(|i| i as f64 * 0.2).collect(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Applies the global seed with precedence flag > `SLFR_SEED` > file.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<()> {
        let env = match std::env::var("SLFR_SEED") {
            Ok(v) => Some(
                v.trim()
                    .parse::<u64>()
                    .map_err(|_| UsageError(format!("SLFR_SEED must be an unsigned integer, got {v:?}")))?,
            ),
            Err(_) => None,
        };
        if let Some(seed) = flag.or(env).or(self.seed) {
            self.seed = Some(seed);
            self.data.split_seed = seed;
            self.vae.seed = seed;
            self.train.seed = seed;
            self.synth.seed = seed;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serializing resolved config")
    }
}

/// Reads `SLFR_THREADS`. Computation is single-threaded; the value is
/// validated and recorded in the manifest.
pub fn threads() -> Result<usize> {
    match std::env::var("SLFR_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => bail!(UsageError(format!("SLFR_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(1),
    }
}

/// Parses `0,0.2,0.4` style lists.
pub fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse::<T>()
                .map_err(|_| UsageError(format!("invalid {what} entry {p:?}")).into())
        })
        .collect()
}
