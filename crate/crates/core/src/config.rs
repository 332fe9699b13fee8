//! Versioned JSON run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluate::LatentFeatures;
use crate::optim::TrainConfig;
use crate::synthetic::ScenarioSpec;

pub const CONFIG_VERSION: u32 = 1;

/// Where the channels come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Channel CSV files, one per channel, in channel order.
    Csv(Vec<PathBuf>),
    /// A directory as written by `generate` (manifest plus channel files).
    Dir(PathBuf),
    /// Synthetic data generated in memory.
    Scenario(ScenarioSpec),
}

/// One latent dimension or a list of them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LatentDims {
    One(usize),
    Many(Vec<usize>),
}

impl LatentDims {
    pub fn as_vec(&self) -> Vec<usize> {
        match self {
            Self::One(l) => vec![*l],
            Self::Many(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Two-column `id,class` file for split-half LDA.
    pub labels: Option<PathBuf>,
    pub lda_repeats: usize,
    pub features: LatentFeatures,
    /// Samples drawn per encoder when estimating the final bound.
    pub mc_samples: usize,
    /// Fraction of samples held out to track a validation bound.
    pub validation_fraction: Option<f64>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            labels: None,
            lda_repeats: 10,
            features: LatentFeatures::Mean,
            mc_samples: 64,
            validation_fraction: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub data: DataSource,
    pub latent_dims: LatentDims,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_true")]
    pub standardize: bool,
    #[serde(default = "default_one")]
    pub replications: usize,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    pub output_dir: PathBuf,
}

fn default_true() -> bool {
    true
}

fn default_one() -> usize {
    1
}

impl RunConfig {
    pub fn new(data: DataSource, latent_dims: LatentDims, output_dir: PathBuf) -> Self {
        Self {
            version: CONFIG_VERSION,
            data,
            latent_dims,
            train: TrainConfig::default(),
            standardize: true,
            replications: 1,
            evaluation: EvaluationConfig::default(),
            output_dir,
        }
    }

    /// Parses a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.data {
            DataSource::Csv(paths) => paths.iter_mut().for_each(join),
            DataSource::Dir(p) => join(p),
            DataSource::Scenario(_) => {}
        }
        if let Some(p) = &mut self.evaluation.labels {
            join(p);
        }
        join(&mut self.output_dir);
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        let dims = self.latent_dims.as_vec();
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::Config(format!("latent dimensions must be >= 1, got {dims:?}")));
        }
        if self.replications == 0 {
            return Err(Error::Config("replications must be >= 1".into()));
        }
        if self.evaluation.mc_samples == 0 || self.evaluation.lda_repeats == 0 {
            return Err(Error::Config("evaluation sample and repeat counts must be >= 1".into()));
        }
        self.train
            .validate()
            .map_err(|e| Error::Config(format!("train: {e}")))?;
        let missing = |p: &Path| Error::Config(format!("{} does not exist", p.display()));
        match &self.data {
            DataSource::Csv(paths) => {
                if paths.is_empty() {
                    return Err(Error::Config("no channel files listed".into()));
                }
                if let Some(p) = paths.iter().find(|p| !p.is_file()) {
                    return Err(missing(p));
                }
            }
            DataSource::Dir(p) if !p.is_dir() => return Err(missing(p)),
            DataSource::Dir(_) => {}
            DataSource::Scenario(spec) => spec
                .validate()
                .map_err(|e| Error::Config(format!("scenario: {e}")))?,
        }
        if let Some(p) = &self.evaluation.labels {
            if !p.is_file() {
                return Err(missing(p));
            }
        }
        Ok(())
    }
}
