//! Evaluation: separation quality under the best output-to-reference
//! assignment, speaker identification F1, counting accuracy, and attention
//! status export.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SccmError};
use crate::extraction::ExtractionNet;
use crate::inference::InferenceNet;
use crate::nn::ParamStore;
use crate::signal::{si_snr, si_snr_improvement, stft_magnitude, StftConfig, Waveform};
use crate::simulate::LoadedRecord;
use crate::training::loss::best_permutation;

/// Separation scores for one recording.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeparationScore {
    /// Mean SI-SNR improvement over the assigned pairs, in dB.
    pub si_snr_improvement_db: f64,
    /// Mean SI-SNR of the assigned pairs, in dB.
    pub si_snr_db: f64,
    pub n_estimates: usize,
    pub n_references: usize,
    /// Assignment over the padded square problem: perm[estimate] = reference.
    pub assignment: Vec<usize>,
}

/// Aggregate over an evaluation set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_records: usize,
    pub mean_si_snr_improvement_db: f64,
    pub mean_si_snr_db: f64,
    /// Fraction of assigned pairs above 5 dB improvement.
    pub frac_above_5db: f64,
    pub counting_accuracy: f64,
    /// Pooled identification F1 over closed-condition records; absent when
    /// every record is open-condition.
    pub micro_f1: Option<f64>,
}

/// Silence floor used when the estimate and reference counts differ: the
/// missing side is scored against digital silence, for which SI-SNR is
/// undefined, so the pair contributes this penalty instead.
pub const MISSING_PAIR_DB: f64 = -30.0;

/// Score a set of estimates against references with best-assignment SI-SNR.
/// When the counts differ the smaller side is padded with synthetic silent
/// entries and each unmatched pair contributes `MISSING_PAIR_DB`.
pub fn eval_separation(
    mixture: &Waveform,
    estimates: &[Waveform],
    references: &[Waveform],
) -> Result<SeparationScore> {
    if references.is_empty() {
        return Err(SccmError::Validation("no reference sources".into()));
    }
    for w in estimates.iter().chain(references) {
        if w.len() != mixture.len() {
            return Err(SccmError::Shape(format!(
                "signal length {} does not match the mixture length {}",
                w.len(),
                mixture.len()
            )));
        }
    }
    let n = estimates.len().max(references.len());
    let mut cost = vec![vec![0.0f64; n]; n];
    let mut improvement = vec![vec![MISSING_PAIR_DB; n]; n];
    let mut snr = vec![vec![MISSING_PAIR_DB; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i < estimates.len() && j < references.len() {
                let s = si_snr(&estimates[i], &references[j])?;
                let imp = si_snr_improvement(mixture, &estimates[i], &references[j])?;
                cost[i][j] = -imp;
                improvement[i][j] = imp;
                snr[i][j] = s;
            } else {
                cost[i][j] = -MISSING_PAIR_DB;
            }
        }
    }
    let (perm, _) = best_permutation(&cost);
    let mean_imp = perm
        .iter()
        .enumerate()
        .map(|(i, &j)| improvement[i][j])
        .sum::<f64>()
        / n as f64;
    let mean_snr = perm.iter().enumerate().map(|(i, &j)| snr[i][j]).sum::<f64>() / n as f64;
    Ok(SeparationScore {
        si_snr_improvement_db: mean_imp,
        si_snr_db: mean_snr,
        n_estimates: estimates.len(),
        n_references: references.len(),
        assignment: perm,
    })
}

/// Pooled (micro-averaged) identification F1 over record-level speaker sets.
/// Open-condition records have no meaningful class labels, so their presence
/// is an error.
pub fn micro_f1(records: &[(Vec<usize>, Vec<usize>, bool)]) -> Result<f64> {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (predicted, actual, open_condition) in records {
        if *open_condition {
            return Err(SccmError::Validation(
                "identification F1 is undefined for open-condition records".into(),
            ));
        }
        for p in predicted {
            if actual.contains(p) {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        for a in actual {
            if !predicted.contains(a) {
                fn_ += 1;
            }
        }
    }
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * tp as f64 / denom as f64)
}

/// Fraction of records whose predicted speaker count equals the true count.
pub fn counting_accuracy(counts: &[(usize, usize)]) -> f64 {
    if counts.is_empty() {
        return 0.0;
    }
    counts.iter().filter(|(p, a)| p == a).count() as f64 / counts.len() as f64
}

/// Greedy inference followed by one extraction per emitted speaker.
pub fn separate_record(
    store: &ParamStore,
    inference: &InferenceNet,
    extractor: &ExtractionNet,
    stft: &StftConfig,
    mixture: &Waveform,
) -> Result<(Vec<Waveform>, Vec<usize>, bool)> {
    let spec = stft_magnitude(mixture, stft)?;
    let out = inference.infer_speakers(store, &spec)?;
    let embeddings: Vec<_> = out.steps.iter().map(|s| s.embedding.clone()).collect();
    let estimates = extractor.extract_all(store, mixture, &embeddings)?;
    let classes = out.steps.iter().map(|s| s.class_index).collect();
    Ok((estimates, classes, out.truncated))
}

/// Full evaluation of the chain model over a record set.
pub fn evaluate(
    store: &ParamStore,
    inference: &InferenceNet,
    extractor: &ExtractionNet,
    stft: &StftConfig,
    records: &[LoadedRecord],
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(SccmError::Validation("empty evaluation set".into()));
    }
    let mut imp_sum = 0.0;
    let mut snr_sum = 0.0;
    let mut above = 0usize;
    let mut pairs = 0usize;
    let mut counts = Vec::new();
    let mut id_records = Vec::new();
    let all_open = records.iter().all(|r| r.open_condition);
    for r in records {
        let (estimates, classes, _) = separate_record(store, inference, extractor, stft, &r.mixture)?;
        let score = eval_separation(&r.mixture, &estimates, &r.sources)?;
        imp_sum += score.si_snr_improvement_db;
        snr_sum += score.si_snr_db;
        let n = estimates.len().max(r.sources.len());
        // Re-derive per-pair improvements for the >5 dB fraction.
        for (i, &j) in score.assignment.iter().enumerate() {
            let imp = if i < estimates.len() && j < r.sources.len() {
                si_snr_improvement(&r.mixture, &estimates[i], &r.sources[j])?
            } else {
                MISSING_PAIR_DB
            };
            if imp > 5.0 {
                above += 1;
            }
        }
        pairs += n;
        counts.push((estimates.len(), r.sources.len()));
        if !r.open_condition {
            id_records.push((classes, r.speaker_ids.clone(), false));
        }
    }
    let micro = if all_open { None } else { Some(micro_f1(&id_records)?) };
    Ok(EvalReport {
        n_records: records.len(),
        mean_si_snr_improvement_db: imp_sum / records.len() as f64,
        mean_si_snr_db: snr_sum / records.len() as f64,
        frac_above_5db: above as f64 / pairs as f64,
        counting_accuracy: counting_accuracy(&counts),
        micro_f1: micro,
    })
}

/// Write one decoder step's attention status as CSV (frame_index,weight)
/// and a grayscale PNG strip, white at the per-record maximum.
pub fn export_attention(status: &[f64], csv_path: &Path, png_path: &Path) -> Result<()> {
    let io = |p: &Path| {
        let path = p.display().to_string();
        move |source: std::io::Error| SccmError::Io { path: path.clone(), source }
    };
    let mut csv = String::from("frame_index,weight\n");
    for (i, w) in status.iter().enumerate() {
        csv.push_str(&format!("{i},{w}\n"));
    }
    std::fs::write(csv_path, csv).map_err(io(csv_path))?;

    let max = status.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
    let height = 24u32;
    let width = status.len() as u32;
    let mut rows = Vec::with_capacity((width * height) as usize);
    for _ in 0..height {
        for w in status {
            rows.push((w / max * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    let file = std::fs::File::create(png_path).map_err(io(png_path))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), width, height);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| SccmError::Validation(format!("png encoding failed: {e}")))?;
    writer
        .write_image_data(&rows)
        .map_err(|e| SccmError::Validation(format!("png encoding failed: {e}")))?;
    Ok(())
}
