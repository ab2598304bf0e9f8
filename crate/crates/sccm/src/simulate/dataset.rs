//! Corpus generation: WAV files on disk plus a JSON-lines manifest, with a
//! closed/open speaker partition between train and test splits.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SccmError};
use crate::signal::Waveform;
use crate::simulate::mixer::{
    mix_fully_overlapped, simulate_multiround, MixtureRecord, MultiRoundConfig,
};
use crate::simulate::speaker::{speaker_grid, SyntheticSpeaker};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MixtureSpec {
    FullyOverlapped {
        min_speakers: usize,
        max_speakers: usize,
        duration_s: f64,
    },
    MultiRound {
        speakers_per_mixture: usize,
        #[serde(flatten)]
        round: MultiRoundConfig,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetConfig {
    /// Size of the training vocabulary (the N known speakers).
    pub n_train_speakers: usize,
    /// Extra unseen speakers for the open-condition test split.
    pub n_test_speakers: usize,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    /// When set, test records draw speakers disjoint from the vocabulary.
    pub open_condition: bool,
    pub snr_range_db: (f64, f64),
    pub mixture: MixtureSpec,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_train_speakers: 8,
            n_test_speakers: 4,
            train_size: 64,
            valid_size: 16,
            test_size: 16,
            open_condition: true,
            snr_range_db: (0.0, 5.0),
            mixture: MixtureSpec::FullyOverlapped {
                min_speakers: 2,
                max_speakers: 2,
                duration_s: 1.0,
            },
            sample_rate: 8000,
            seed: 17,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestRecord {
    pub mixture_path: String,
    pub source_paths: Vec<String>,
    pub speaker_ids: Vec<usize>,
    pub offsets: Vec<usize>,
    pub snr_db: Vec<f64>,
    pub overlap_ratio: f64,
    pub duration_s: f64,
    pub split: String,
    pub open_condition: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn split(&self, name: &str) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == name).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        fs::write(path.as_ref(), out).map_err(|e| SccmError::io(path.as_ref().display().to_string(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = fs::File::open(path.as_ref())
            .map_err(|e| SccmError::io(path.as_ref().display().to_string(), e))?;
        let mut records = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| SccmError::io(path.as_ref().display().to_string(), e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Ok(Manifest { records })
    }

    /// Hash of manifest content plus every referenced WAV, for reproducibility checks.
    pub fn corpus_hash(&self, base_dir: impl AsRef<Path>) -> Result<String> {
        let base = base_dir.as_ref();
        let mut hasher = Sha256::new();
        for r in &self.records {
            hasher.update(serde_json::to_string(r)?.as_bytes());
            for p in std::iter::once(&r.mixture_path).chain(&r.source_paths) {
                let bytes = fs::read(base.join(p)).map_err(|e| SccmError::io(p.clone(), e))?;
                hasher.update(&bytes);
            }
        }
        Ok(hex_digest(hasher))
    }
}

fn hex_digest(hasher: Sha256) -> String {
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn derive_seed(corpus_seed: u64, split: &str, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(corpus_seed.to_le_bytes());
    h.update(split.as_bytes());
    h.update((index as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Pick `count` distinct speakers from a pool, deterministically per seed.
fn pick_speakers<'a>(pool: &'a [SyntheticSpeaker], count: usize, seed: u64) -> Vec<&'a SyntheticSpeaker> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(count);
    idx.iter().map(|&i| &pool[i]).collect()
}

pub fn training_speakers(cfg: &DatasetConfig) -> Vec<SyntheticSpeaker> {
    speaker_grid(cfg.n_train_speakers, 0, 0.0, cfg.seed)
}

pub fn open_condition_speakers(cfg: &DatasetConfig) -> Vec<SyntheticSpeaker> {
    // Offset the f0 grid by half a step so open-condition voices sit between
    // training voices rather than on top of them.
    speaker_grid(cfg.n_test_speakers, cfg.n_train_speakers, 4.5, cfg.seed)
}

/// Generate one record of the configured mixture type.
pub fn generate_record(
    cfg: &DatasetConfig,
    pool: &[SyntheticSpeaker],
    seed: u64,
) -> Result<MixtureRecord> {
    use rand::Rng;
    use rand::SeedableRng;
    match &cfg.mixture {
        MixtureSpec::FullyOverlapped {
            min_speakers,
            max_speakers,
            duration_s,
        } => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xc0);
            let count = rng.gen_range(*min_speakers..=*max_speakers);
            let chosen = pick_speakers(pool, count, seed ^ 0xc1);
            mix_fully_overlapped(&chosen, cfg.snr_range_db, *duration_s, cfg.sample_rate, seed)
        }
        MixtureSpec::MultiRound {
            speakers_per_mixture,
            round,
        } => {
            let chosen = pick_speakers(pool, *speakers_per_mixture, seed ^ 0xc1);
            simulate_multiround(&chosen, round, cfg.snr_range_db, cfg.sample_rate, seed)
        }
    }
}

/// Write the corpus to `out_dir` and return its manifest. Splits enforce the
/// closed/open speaker partition: train/valid always draw from the training
/// vocabulary; test draws from disjoint speakers when `open_condition` is set.
pub fn build_dataset(cfg: &DatasetConfig, out_dir: impl AsRef<Path>, force: bool) -> Result<Manifest> {
    let out = out_dir.as_ref();
    let manifest_path = out.join("manifest.jsonl");
    if manifest_path.exists() && !force {
        return Err(SccmError::Data(format!(
            "output directory {} already contains a manifest (use --force to overwrite)",
            out.display()
        )));
    }
    let closed_pool = training_speakers(cfg);
    let open_pool = open_condition_speakers(cfg);

    let mut manifest = Manifest::default();
    for (split, size) in [
        ("train", cfg.train_size),
        ("valid", cfg.valid_size),
        ("test", cfg.test_size),
    ] {
        let split_dir = out.join(split);
        if size > 0 {
            fs::create_dir_all(&split_dir)
                .map_err(|e| SccmError::io(split_dir.display().to_string(), e))?;
        }
        let open = split == "test" && cfg.open_condition;
        let pool = if open { &open_pool } else { &closed_pool };
        for i in 0..size {
            let seed = derive_seed(cfg.seed, split, i);
            let rec = generate_record(cfg, pool, seed)?;
            rec.validate()?;
            let mixture_rel = format!("{split}/mix_{i:05}.wav");
            rec.mixture.save_wav(out.join(&mixture_rel))?;
            let mut source_paths = Vec::new();
            for (k, src) in rec.sources.iter().enumerate() {
                let rel = format!("{split}/mix_{i:05}_src{k}.wav");
                src.save_wav(out.join(&rel))?;
                source_paths.push(rel);
            }
            manifest.records.push(ManifestRecord {
                mixture_path: mixture_rel,
                source_paths,
                speaker_ids: rec.speakers.clone(),
                offsets: rec.offsets(),
                snr_db: rec.snrs_db(),
                overlap_ratio: rec.overlap_ratio,
                duration_s: rec.duration_s(),
                split: split.to_string(),
                open_condition: open,
            });
        }
    }
    manifest.save(&manifest_path)?;
    Ok(manifest)
}

/// A manifest record loaded back into memory for training or scoring.
#[derive(Clone, Debug)]
pub struct LoadedRecord {
    pub mixture: Waveform,
    pub sources: Vec<Waveform>,
    pub speaker_ids: Vec<usize>,
    pub open_condition: bool,
}

pub fn load_record(base_dir: impl AsRef<Path>, rec: &ManifestRecord) -> Result<LoadedRecord> {
    let base = base_dir.as_ref();
    let mixture = Waveform::load_wav(base.join(&rec.mixture_path))?;
    let sources = rec
        .source_paths
        .iter()
        .map(|p| Waveform::load_wav(base.join(p)))
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedRecord {
        mixture,
        sources,
        speaker_ids: rec.speaker_ids.clone(),
        open_condition: rec.open_condition,
    })
}

pub fn manifest_path(dir: impl AsRef<Path>) -> PathBuf {
    dir.as_ref().join("manifest.jsonl")
}
