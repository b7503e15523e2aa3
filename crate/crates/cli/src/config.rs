//! Optional `stubmatch.toml` settings, merged under command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Deserialize;
use stubmatch::cluster::ClusterOptions;
use stubmatch::gmn::{GmnConfig, LossForm};
use stubmatch::identify::IdentifyOptions;

pub const DEFAULT_CONFIG_FILE: &str = "stubmatch.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Json,
    Csv,
    Table,
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentifySection {
    pub unknown_on_zero_score: Option<bool>,
}

/// File layout. Every key is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub registry: Option<PathBuf>,
    pub format: Option<Format>,
    pub seed: Option<u64>,
    pub log_level: Option<String>,
    pub jobs: Option<usize>,
    pub gmn: Option<GmnConfig>,
    pub cluster: Option<ClusterOptions>,
    pub identify: IdentifySection,
}

impl FileConfig {
    /// Reads `explicit` if given, else `./stubmatch.toml` when present.
    pub fn load(explicit: Option<&Path>) -> Result<FileConfig> {
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None => {
                let p = PathBuf::from(DEFAULT_CONFIG_FILE);
                if !p.exists() {
                    return Ok(FileConfig::default());
                }
                p
            }
        };
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }
}

/// Flags that override the file.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Registry directory.
    #[arg(long, global = true)]
    pub registry: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for batch commands (default: logical cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub k_max: Option<usize>,
    #[arg(long, global = true)]
    pub s_min: Option<f64>,
    #[arg(long, global = true)]
    pub loss_form: Option<LossForm>,
    #[arg(long, global = true)]
    pub unknown_on_zero_score: Option<bool>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true)]
    pub log_level: Option<String>,
}

/// Effective settings after merging.
#[derive(Debug, Clone)]
pub struct CliConfig {
    pub registry: Option<PathBuf>,
    pub format: Format,
    pub jobs: Option<usize>,
    pub log_level: String,
    pub gmn: GmnConfig,
    pub cluster: ClusterOptions,
    pub identify: IdentifyOptions,
}

impl CliConfig {
    pub fn merge(file: FileConfig, flags: &Overrides) -> CliConfig {
        let mut gmn = file.gmn.unwrap_or_default();
        let mut cluster = file.cluster.unwrap_or_default();
        let mut identify = IdentifyOptions::default();
        if let Some(seed) = flags.seed.or(file.seed) {
            gmn.seed = seed;
        }
        if let Some(e) = flags.epochs {
            gmn.epochs = e;
        }
        if let Some(l) = flags.loss_form {
            gmn.loss_form = l;
        }
        if let Some(k) = flags.k_max {
            cluster.k_max = k;
        }
        if let Some(s) = flags.s_min {
            cluster.s_min = s;
        }
        if let Some(u) = flags
            .unknown_on_zero_score
            .or(file.identify.unknown_on_zero_score)
        {
            identify.unknown_on_zero_score = u;
        }
        CliConfig {
            registry: flags.registry.clone().or(file.registry),
            format: flags.format.or(file.format).unwrap_or_default(),
            jobs: flags.jobs.or(file.jobs),
            log_level: flags
                .log_level
                .clone()
                .or(file.log_level)
                .unwrap_or_else(|| "info".into()),
            gmn,
            cluster,
            identify,
        }
    }

    pub fn registry(&self) -> Result<&Path> {
        self.registry
            .as_deref()
            .context("no registry given (use --registry or `registry` in stubmatch.toml)")
    }
}
