//! Run configuration file.
//!
//! A TOML document with a `schema_version` and one table per concern:
//!
//! ```toml
//! schema_version = 1
//! output_dir = "runs/copy"      # optional
//!
//! [model]                       # required
//! enc_depth = 2
//! dec_depth = 2
//! d_model = 32
//! heads = 4
//! vocab_size = 16
//! [model.multipath]
//! n_paths = 2
//!
//! [schedule]                    # required by `train` unless --preset is given
//! peak_lr = 0.0005
//! warmup_steps = 400
//!
//! [task]                        # required by `train`
//! kind = "copy"
//! vocab = 16
//! min_len = 5
//! max_len = 10
//! samples_per_epoch = 20000
//!
//! [training]                    # required by `train`
//! steps = 5000
//! batch = 32
//!
//! [bench]                       # required by `bench`
//! ```
//!
//! Unknown keys anywhere are errors.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use multipath::path_bench::BenchSpec;
use multipath::train::{ScheduleConfig, TaskSpec, TrainOptions};
use multipath::ModelConfig;
use serde::Deserialize;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    #[serde(default)]
    pub schedule: Option<ScheduleConfig>,
    #[serde(default)]
    pub task: Option<TaskSpec>,
    #[serde(default)]
    pub training: Option<TrainOptions>,
    #[serde(default)]
    pub bench: Option<BenchSpec>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        if cfg.schema_version != SCHEMA_VERSION {
            bail!(
                "unsupported schema_version {} (this build reads version {SCHEMA_VERSION})",
                cfg.schema_version
            );
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Checks every section that is present.
    pub fn validate(&self) -> Result<()> {
        self.model.validate().context("[model]")?;
        if let Some(s) = &self.schedule {
            s.validate().context("[schedule]")?;
        }
        if let Some(t) = &self.task {
            t.validate().context("[task]")?;
        }
        if let Some(t) = &self.training {
            t.validate().context("[training]")?;
        }
        if let Some(b) = &self.bench {
            b.validate().context("[bench]")?;
        }
        Ok(())
    }

    /// Replaces every seed in the configuration.
    pub fn reseed(&mut self, seed: u64) {
        self.model.seed = seed;
        if let Some(t) = &mut self.task {
            t.seed = seed;
        }
        if let Some(b) = &mut self.bench {
            b.seed = seed;
        }
    }
}
