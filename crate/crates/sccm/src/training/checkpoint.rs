//! Versioned JSON checkpoints: every parameter by name with its group and
//! shape, the model configurations, the speaker vocabulary, and optionally
//! the optimizer state so training can resume.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SccmError};
use crate::extraction::ExtractorConfig;
use crate::inference::{InferenceNetConfig, SpeakerVocabulary};
use crate::nn::{AdamState, ParamGroup, ParamStore};
use crate::signal::StftConfig;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
pub struct ParamBlob {
    pub name: String,
    pub group: ParamGroup,
    pub rows: usize,
    pub cols: usize,
    /// Row-major values.
    pub data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub created: String,
    pub vocab: SpeakerVocabulary,
    pub stft: StftConfig,
    pub inference_cfg: InferenceNetConfig,
    pub extractor_cfg: ExtractorConfig,
    pub epoch: u32,
    pub global_step: u64,
    pub params: Vec<ParamBlob>,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn capture(
        store: &ParamStore,
        vocab: &SpeakerVocabulary,
        stft: &StftConfig,
        inference_cfg: &InferenceNetConfig,
        extractor_cfg: &ExtractorConfig,
        epoch: u32,
        global_step: u64,
        adam: Option<AdamState>,
    ) -> Self {
        let params = store
            .iter()
            .map(|(_, e)| ParamBlob {
                name: e.name.clone(),
                group: e.group,
                rows: e.value.nrows(),
                cols: e.value.ncols(),
                data: e.value.iter().cloned().collect(),
            })
            .collect();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            created: chrono::Utc::now().to_rfc3339(),
            vocab: vocab.clone(),
            stft: stft.clone(),
            inference_cfg: inference_cfg.clone(),
            extractor_cfg: extractor_cfg.clone(),
            epoch,
            global_step,
            params,
            adam,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |source: std::io::Error| SccmError::Io {
            path: path.display().to_string(),
            source,
        };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let file = std::fs::File::create(path).map_err(io)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|source| SccmError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let ckpt: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(SccmError::Validation(format!(
                "checkpoint version {} is not supported (expected {})",
                ckpt.version, CHECKPOINT_VERSION
            )));
        }
        Ok(ckpt)
    }

    /// Restore parameter values into a store with identical layout (same
    /// names in the same registration order).
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(SccmError::Validation(format!(
                "checkpoint has {} parameters but the model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (id, blob) in self.params.iter().enumerate() {
            let entry = store.entry(id);
            if entry.name != blob.name {
                return Err(SccmError::Validation(format!(
                    "parameter {id} is '{}' in the model but '{}' in the checkpoint",
                    entry.name, blob.name
                )));
            }
            if entry.value.dim() != (blob.rows, blob.cols) {
                return Err(SccmError::Validation(format!(
                    "parameter '{}' is {:?} in the model but ({}, {}) in the checkpoint",
                    blob.name,
                    entry.value.dim(),
                    blob.rows,
                    blob.cols
                )));
            }
            let arr = Array2::from_shape_vec((blob.rows, blob.cols), blob.data.clone())
                .map_err(|e| SccmError::Validation(format!("parameter '{}': {e}", blob.name)))?;
            store.set_value(id, arr);
        }
        Ok(())
    }
}
