//! Mixture construction: fully-overlapped short mixtures and multi-round
//! long recordings with partial overlap.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SccmError};
use crate::signal::Waveform;
use crate::simulate::speaker::{synth_utterance, SyntheticSpeaker};

/// One placed utterance inside a recording.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Placement {
    pub speaker_id: usize,
    pub offset: usize,
    pub len: usize,
    pub snr_db: f64,
}

/// A mixture plus per-speaker full-length reference sources and the
/// simulation metadata needed to reproduce and score it.
#[derive(Clone, Debug)]
pub struct MixtureRecord {
    pub mixture: Waveform,
    /// One per entry of `speakers`, each the full mixture length with
    /// silence where that speaker is inactive.
    pub sources: Vec<Waveform>,
    /// Canonical storage order; carries no semantic order.
    pub speakers: Vec<usize>,
    pub placements: Vec<Placement>,
    /// Fraction of samples where two or more speakers are simultaneously active.
    pub overlap_ratio: f64,
    /// Common gain applied to mixture and all sources to avoid clipping.
    pub gain: f64,
    /// True when a negative shift was clamped to the recording start.
    pub shift_clamped: bool,
}

impl MixtureRecord {
    pub fn n_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn duration_s(&self) -> f64 {
        self.mixture.duration_s()
    }

    pub fn offsets(&self) -> Vec<usize> {
        self.placements.iter().map(|p| p.offset).collect()
    }

    pub fn snrs_db(&self) -> Vec<f64> {
        self.placements.iter().map(|p| p.snr_db).collect()
    }

    /// Per-sample activity mask for the speaker at `speaker_index`
    /// (activity: |sample| > 0 within a placed utterance span).
    pub fn activity(&self, speaker_index: usize) -> Vec<bool> {
        let src = &self.sources[speaker_index];
        let id = self.speakers[speaker_index];
        let mut mask = vec![false; src.len()];
        for p in self.placements.iter().filter(|p| p.speaker_id == id) {
            let end = (p.offset + p.len).min(src.len());
            for t in p.offset..end {
                if src.samples[t].abs() > 0.0 {
                    mask[t] = true;
                }
            }
        }
        mask
    }

    /// Sum-of-sources identity must hold sample-exactly.
    pub fn validate(&self) -> Result<()> {
        if self.sources.len() != self.speakers.len() || self.speakers.is_empty() {
            return Err(SccmError::Validation(
                "sources/speakers count mismatch or empty record".into(),
            ));
        }
        for src in &self.sources {
            if src.len() != self.mixture.len() {
                return Err(SccmError::Validation("source length mismatch".into()));
            }
        }
        for t in 0..self.mixture.len() {
            let sum: f64 = self.sources.iter().map(|s| s.samples[t]).sum();
            if sum != self.mixture.samples[t] {
                return Err(SccmError::Validation(format!(
                    "mixture != sum of sources at sample {t}"
                )));
            }
        }
        Ok(())
    }
}

fn check_distinct(speakers: &[&SyntheticSpeaker]) -> Result<()> {
    for i in 0..speakers.len() {
        for j in i + 1..speakers.len() {
            if speakers[i].speaker_id == speakers[j].speaker_id {
                return Err(SccmError::Validation(format!(
                    "duplicate speaker id {}",
                    speakers[i].speaker_id
                )));
            }
        }
    }
    Ok(())
}

fn overlap_ratio_of(sources: &[Waveform]) -> f64 {
    let len = sources[0].len();
    if len == 0 {
        return 0.0;
    }
    let mut overlapped = 0usize;
    for t in 0..len {
        let active = sources.iter().filter(|s| s.samples[t].abs() > 0.0).count();
        if active >= 2 {
            overlapped += 1;
        }
    }
    overlapped as f64 / len as f64
}

/// Rescale mixture and sources by a common gain so nothing clips; the
/// sum-of-sources identity is preserved by reassembling the mixture from
/// the scaled sources.
fn finish_record(
    sources: Vec<Waveform>,
    speakers: Vec<usize>,
    placements: Vec<Placement>,
    shift_clamped: bool,
    sample_rate: u32,
) -> MixtureRecord {
    let len = sources[0].len();
    let mut mixture = Waveform::zeros(len, sample_rate);
    for s in &sources {
        mixture.add(s).expect("equal lengths");
    }
    let peak = mixture.peak().max(sources.iter().map(|s| s.peak()).fold(0.0, f64::max));
    let gain = if peak > 0.95 { 0.95 / peak } else { 1.0 };
    let sources: Vec<Waveform> = sources
        .into_iter()
        .map(|mut s| {
            s.scale(gain);
            s
        })
        .collect();
    let mut mixture = Waveform::zeros(len, sample_rate);
    for s in &sources {
        mixture.add(s).expect("equal lengths");
    }
    let overlap_ratio = overlap_ratio_of(&sources);
    MixtureRecord {
        mixture,
        sources,
        speakers,
        placements,
        overlap_ratio,
        gain,
        shift_clamped,
    }
}

/// WSJ0-mix style protocol: every speaker talks for the whole duration.
pub fn mix_fully_overlapped(
    speakers: &[&SyntheticSpeaker],
    snr_range_db: (f64, f64),
    duration_s: f64,
    sample_rate: u32,
    seed: u64,
) -> Result<MixtureRecord> {
    if speakers.is_empty() || speakers.len() > 4 {
        return Err(SccmError::Validation(format!(
            "speaker count {} outside 1..=4",
            speakers.len()
        )));
    }
    check_distinct(speakers)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf011_0e22_u64);
    let n = (duration_s * sample_rate as f64).round() as usize;
    let mut sources = Vec::new();
    let mut placements = Vec::new();
    for (idx, spk) in speakers.iter().enumerate() {
        let utt_seed: u64 = rng.gen();
        let snr_db = rng.gen_range(snr_range_db.0..=snr_range_db.1);
        let mut utt = synth_utterance(spk, duration_s, sample_rate, utt_seed)?;
        utt.samples.resize(n, 0.0);
        utt.scale(10f64.powf(snr_db / 20.0));
        placements.push(Placement {
            speaker_id: spk.speaker_id,
            offset: 0,
            len: n,
            snr_db,
        });
        sources.push(utt);
        let _ = idx;
    }
    let speaker_ids = speakers.iter().map(|s| s.speaker_id).collect();
    Ok(finish_record(sources, speaker_ids, placements, false, sample_rate))
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MultiRoundConfig {
    pub k_min: u32,
    pub k_max: u32,
    /// Random shift half-range around each utterance boundary, in seconds.
    pub beta_s: f64,
    pub utt_min_s: f64,
    pub utt_max_s: f64,
    /// Shuffle speaker order within each round (off by default: fixed
    /// round-robin order, matching the simulation procedure as written).
    pub shuffle_order: bool,
}

impl Default for MultiRoundConfig {
    fn default() -> Self {
        MultiRoundConfig {
            k_min: 4,
            k_max: 4,
            beta_s: 0.85,
            utt_min_s: 0.75,
            utt_max_s: 1.75,
            shuffle_order: false,
        }
    }
}

/// Multi-round conversation simulation: speakers take turns for k rounds,
/// each next utterance starting near the current recording end with a
/// random shift in (-beta, +beta), producing partial overlaps.
pub fn simulate_multiround(
    speakers: &[&SyntheticSpeaker],
    cfg: &MultiRoundConfig,
    snr_range_db: (f64, f64),
    sample_rate: u32,
    seed: u64,
) -> Result<MixtureRecord> {
    if speakers.is_empty() {
        return Err(SccmError::Validation("no speakers".into()));
    }
    check_distinct(speakers)?;
    if cfg.k_min > cfg.k_max {
        return Err(SccmError::Validation("k_min > k_max".into()));
    }
    if cfg.beta_s < 0.0 {
        return Err(SccmError::Validation("beta_s must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0417_1207_u64);
    let rounds = rng.gen_range(cfg.k_min..=cfg.k_max);
    let beta = (cfg.beta_s * sample_rate as f64).round() as i64;

    let mut placements: Vec<Placement> = Vec::new();
    let mut recording_len = 0usize;
    let mut cursor: usize = 0;
    let mut shift_clamped = false;
    let mut order: Vec<usize> = (0..speakers.len()).collect();
    for _ in 0..rounds {
        if cfg.shuffle_order {
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
        }
        for &si in &order {
            let spk = speakers[si];
            let dur = rng.gen_range(cfg.utt_min_s..=cfg.utt_max_s);
            let utt_seed: u64 = rng.gen();
            let snr_db = rng.gen_range(snr_range_db.0..=snr_range_db.1);
            let len = (dur * sample_rate as f64).round() as usize;
            placements.push(Placement {
                speaker_id: spk.speaker_id,
                offset: cursor,
                len,
                snr_db,
            });
            let _ = utt_seed;
            recording_len = recording_len.max(cursor + len);
            cursor = recording_len;
            if beta > 0 {
                let shift = rng.gen_range(-beta..=beta);
                let shifted = cursor as i64 + shift;
                if shifted < 0 {
                    cursor = 0;
                    shift_clamped = true;
                } else {
                    cursor = shifted as usize;
                }
            }
        }
    }

    // Synthesize and place. Utterance seeds must not depend on placement
    // bookkeeping, so draw them in a second pass from a forked stream.
    let mut synth_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e_c0_4d_9a);
    let mut sources: Vec<Waveform> = speakers
        .iter()
        .map(|_| Waveform::zeros(recording_len, sample_rate))
        .collect();
    for p in &placements {
        let si = speakers.iter().position(|s| s.speaker_id == p.speaker_id).unwrap();
        let utt_seed: u64 = synth_rng.gen();
        let dur = p.len as f64 / sample_rate as f64;
        let mut utt = synth_utterance(speakers[si], dur, sample_rate, utt_seed)?;
        utt.samples.resize(p.len, 0.0);
        utt.scale(10f64.powf(p.snr_db / 20.0));
        for (k, &v) in utt.samples.iter().enumerate() {
            sources[si].samples[p.offset + k] += v;
        }
    }
    let speaker_ids = speakers.iter().map(|s| s.speaker_id).collect();
    Ok(finish_record(
        sources,
        speaker_ids,
        placements,
        shift_clamped,
        sample_rate,
    ))
}
