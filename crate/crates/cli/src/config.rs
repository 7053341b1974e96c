use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use hypnos_core::diagnosis::Thresholds;
use hypnos_core::encoding::EncodingMode;
use hypnos_core::neuralnet::{NetworkConfig, TrainConfig, ENSEMBLE_SIZE};
use hypnos_core::signal_io::ALLOWED_EPOCH_S;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Recording metadata (`*.psgmeta.json`).
    pub recording: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Reference distribution for EEG channel selection.
    pub reference: Option<PathBuf>,
    /// Stage-classifier ensemble manifest.
    pub ensemble: Option<PathBuf>,
    /// GP classifier manifest.
    pub classifiers: Option<PathBuf>,
}

/// Pipeline settings read from a JSON file; command-line flags win.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub encoding: EncodingMode,
    pub network: Option<NetworkConfig>,
    pub ensemble_size: usize,
    pub train: TrainConfig,
    pub thresholds: Thresholds,
    pub hla_positive: Option<bool>,
    pub seed: u64,
    pub resolution_s: u32,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            paths: Paths::default(),
            encoding: EncodingMode::Cc,
            network: None,
            ensemble_size: ENSEMBLE_SIZE,
            train: TrainConfig::default(),
            thresholds: Thresholds::default(),
            hla_positive: None,
            seed: 0,
            resolution_s: 30,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: PipelineConfig = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if !ALLOWED_EPOCH_S.contains(&self.resolution_s) {
            bail!(hypnos_core::Error::InvalidEpoch(self.resolution_s));
        }
        if self.ensemble_size == 0 {
            bail!(hypnos_core::Error::InvalidConfig("ensemble_size must be at least 1".into()));
        }
        if !self.thresholds.narcolepsy.is_finite() || !self.thresholds.hla.is_finite() {
            bail!(hypnos_core::Error::InvalidConfig("thresholds must be finite".into()));
        }
        if let Some(net) = &self.network {
            net.validate()?;
            if net.encoding != self.encoding {
                bail!(hypnos_core::Error::InvalidConfig(format!(
                    "network encoding {} differs from pipeline encoding {}",
                    net.encoding, self.encoding
                )));
            }
        }
        Ok(())
    }
}

/// Returns the flag value, else the config value, else an error naming both.
pub fn require(flag: Option<PathBuf>, config: &Option<PathBuf>, what: &str) -> anyhow::Result<PathBuf> {
    match flag.or_else(|| config.clone()) {
        Some(p) => Ok(p),
        None => bail!(hypnos_core::Error::InvalidConfig(format!("no {what} given (flag or config paths)"))),
    }
}
