//! Run configuration: one TOML file drives every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::synthetic::SyntheticSpec;
use crate::data::FIVE_CORE;
use crate::eval::EvalConfig;
use crate::features::FeatureConfig;
use crate::model::{Ablation, ModelConfig};
use crate::numeric::{NumericConfig, NumericTrainConfig};
use crate::params::hex;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

pub type Result<T, E = ConfigError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Canonical JSONL file.
    pub path: Option<PathBuf>,
    pub registry: Option<PathBuf>,
    pub sidecar: Option<PathBuf>,
    /// Generate the data in memory instead of loading it.
    pub synthetic: Option<SyntheticSpec>,
    /// k of the k-core filter; 0 or 1 disables it.
    pub min_degree: usize,
    pub strict: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            registry: None,
            sidecar: None,
            synthetic: None,
            min_degree: FIVE_CORE,
            strict: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NumericSection {
    /// Frequency bands; derived from the model width when absent.
    pub n_freq: Option<usize>,
    pub f_min: f64,
    pub f_max: f64,
    pub scale_bound: f64,
    pub train: NumericTrainConfig,
}

impl Default for NumericSection {
    fn default() -> Self {
        let base = NumericConfig::for_width(32);
        Self {
            n_freq: None,
            f_min: base.f_min,
            f_max: base.f_max,
            scale_bound: base.scale_bound,
            train: NumericTrainConfig::default(),
        }
    }
}

impl NumericSection {
    pub fn encoder_config(&self, d: usize) -> NumericConfig {
        let base = NumericConfig::for_width(d);
        NumericConfig {
            n_freq: self.n_freq.unwrap_or(base.n_freq),
            f_min: self.f_min,
            f_max: self.f_max,
            d_out: d,
            scale_bound: self.scale_bound,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub features: FeatureConfig,
    pub numeric: NumericSection,
    pub model: ModelConfig,
    pub ablation: Ablation,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative data paths resolve against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.path, &mut cfg.data.registry, &mut cfg.data.sidecar].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let inv = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.model.validate().map_err(|e| inv(&e))?;
        self.ablation.validate().map_err(|e| inv(&e))?;
        self.numeric.encoder_config(self.model.d).validate().map_err(|e| inv(&e))?;
        self.pretrain.validate().map_err(|e| inv(&format!("[pretrain] {e}")))?;
        self.finetune.validate().map_err(|e| inv(&format!("[finetune] {e}")))?;
        self.eval.validate().map_err(|e| inv(&e))?;
        match (&self.data.synthetic, &self.data.path, &self.data.registry) {
            (Some(spec), None, None) => spec.validate().map_err(|e| inv(&e)),
            (None, Some(_), Some(_)) => Ok(()),
            (Some(_), _, _) => Err(ConfigError::Invalid(
                "`data.synthetic` cannot be combined with `data.path` / `data.registry`".into(),
            )),
            (None, _, _) => Err(ConfigError::Invalid(
                "set either `data.synthetic` or both `data.path` and `data.registry`".into(),
            )),
        }
    }

    /// Sets the run seed, and the synthetic generator's seed with it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        if let Some(s) = &mut self.data.synthetic {
            s.seed = seed;
        }
        self
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Short hash of the canonical serialization.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(serde_json::to_vec(self).expect("config serializes"));
        hex(&digest[..8])
    }
}
