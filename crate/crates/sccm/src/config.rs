//! Experiment configuration: a TOML file with optional sections that fall
//! back to the selected profile's defaults. Validation collects every
//! violation before failing, and relative paths resolve against the config
//! file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SccmError};
use crate::extraction::ExtractorConfig;
use crate::inference::InferenceNetConfig;
use crate::signal::StftConfig;
use crate::simulate::{DatasetConfig, MixtureSpec};
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Small models sized for quick CPU runs.
    Desk,
    /// Full-scale models.
    Paper,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RawConfig {
    #[serde(default = "default_profile")]
    profile: Profile,
    #[serde(default = "default_data_dir")]
    data_dir: PathBuf,
    #[serde(default = "default_output_dir")]
    output_dir: PathBuf,
    stft: Option<StftConfig>,
    dataset: Option<DatasetConfig>,
    inference_net: Option<InferenceNetConfig>,
    extraction_net: Option<ExtractorConfig>,
    train: Option<TrainConfig>,
}

fn default_profile() -> Profile {
    Profile::Desk
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("data")
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Fully resolved configuration for one experiment.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub profile: Profile,
    /// Corpus location, absolute after resolution.
    pub data_dir: PathBuf,
    /// Reports, checkpoints, and exports go here, absolute after resolution.
    pub output_dir: PathBuf,
    pub stft: StftConfig,
    pub dataset: DatasetConfig,
    pub inference_net: InferenceNetConfig,
    pub extraction_net: ExtractorConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn defaults(profile: Profile) -> Self {
        let (inference_net, extraction_net) = match profile {
            Profile::Desk => (InferenceNetConfig::desk(), ExtractorConfig::desk()),
            Profile::Paper => (InferenceNetConfig::paper(), ExtractorConfig::paper()),
        };
        ExperimentConfig {
            profile,
            data_dir: default_data_dir(),
            output_dir: default_output_dir(),
            stft: StftConfig::default(),
            dataset: DatasetConfig::default(),
            inference_net,
            extraction_net,
            train: TrainConfig::default(),
        }
    }

    /// Parse, fill profile defaults for absent sections, resolve paths
    /// against the config file's directory, apply the `SCCM_SEED`
    /// environment override, and validate.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| SccmError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let raw: RawConfig = toml::from_str(&text)
            .map_err(|e| SccmError::Config(format!("{}: {e}", path.display())))?;
        let defaults = Self::defaults(raw.profile);
        let mut cfg = ExperimentConfig {
            profile: raw.profile,
            data_dir: raw.data_dir,
            output_dir: raw.output_dir,
            stft: raw.stft.unwrap_or(defaults.stft),
            dataset: raw.dataset.unwrap_or(defaults.dataset),
            inference_net: raw.inference_net.unwrap_or(defaults.inference_net),
            extraction_net: raw.extraction_net.unwrap_or(defaults.extraction_net),
            train: raw.train.unwrap_or(defaults.train),
        };
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        if cfg.data_dir.is_relative() {
            cfg.data_dir = base.join(&cfg.data_dir);
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        if let Some(seed) = seed_override()? {
            cfg.dataset.seed = seed;
            cfg.train.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// All violations at once, so a bad config is fixed in one pass.
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        self.inference_net.validate(&mut errors);
        self.extraction_net.validate(&mut errors);
        if self.extraction_net.cond_dim != 0
            && self.extraction_net.cond_dim != self.inference_net.d_model
        {
            errors.push(format!(
                "extraction_net.cond_dim ({}) must equal inference_net.d_model ({})",
                self.extraction_net.cond_dim, self.inference_net.d_model
            ));
        }
        let stft_bins = self.stft.n_bins(self.dataset.sample_rate);
        if stft_bins != self.inference_net.n_bins {
            errors.push(format!(
                "inference_net.n_bins ({}) must match the spectrogram bin count ({stft_bins})",
                self.inference_net.n_bins
            ));
        }
        if self.dataset.n_train_speakers == 0 {
            errors.push("dataset: n_train_speakers must be >= 1".into());
        }
        if self.dataset.open_condition && self.dataset.n_test_speakers == 0 {
            errors.push("dataset: open_condition requires n_test_speakers >= 1".into());
        }
        let max_concurrent = match &self.dataset.mixture {
            MixtureSpec::FullyOverlapped {
                min_speakers,
                max_speakers,
                ..
            } => {
                if min_speakers > max_speakers {
                    errors.push(format!(
                        "dataset: min_speakers ({min_speakers}) exceeds max_speakers ({max_speakers})"
                    ));
                }
                *max_speakers
            }
            MixtureSpec::MultiRound {
                speakers_per_mixture,
                ..
            } => *speakers_per_mixture,
        };
        if max_concurrent + 1 > self.inference_net.max_steps {
            errors.push(format!(
                "inference_net.max_steps ({}) cannot fit {max_concurrent} speakers plus the end-of-sequence step",
                self.inference_net.max_steps
            ));
        }
        if max_concurrent > self.dataset.n_train_speakers {
            errors.push(format!(
                "dataset: mixtures of {max_concurrent} speakers need at least that many training speakers ({} configured)",
                self.dataset.n_train_speakers
            ));
        }
        if self.dataset.snr_range_db.0 > self.dataset.snr_range_db.1 {
            errors.push("dataset: snr_range_db is inverted".into());
        }
        if self.train.batch_size == 0 {
            errors.push("train: batch_size must be >= 1".into());
        }
        if self.train.lr <= 0.0 {
            errors.push("train: lr must be positive".into());
        }
        if self.train.segment_s <= 0.0 {
            errors.push("train: segment_s must be positive".into());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(SccmError::ConfigInvalid(errors))
        }
    }
}

/// `SCCM_SEED` overrides both the corpus and the training seed.
fn seed_override() -> Result<Option<u64>> {
    match std::env::var("SCCM_SEED") {
        Ok(v) => v
            .parse::<u64>()
            .map(Some)
            .map_err(|_| SccmError::Config(format!("SCCM_SEED must be a u64, got '{v}'"))),
        Err(_) => Ok(None),
    }
}
