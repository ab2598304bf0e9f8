//! Training loops: the joint chain model, the fixed-output baseline, and
//! the cascade refinement stage. All loops are deterministic given the
//! config seed.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SccmError};
use crate::eval::{evaluate, eval_separation};
use crate::extraction::ExtractionNet;
use crate::inference::{DropoutCtx, InferenceNet};
use crate::nn::{decayed_lr, Adam, AdamConfig, Graph, ParamGroup, ParamStore};
use crate::signal::{StftConfig, Waveform};
use crate::simulate::LoadedRecord;
use crate::training::checkpoint::Checkpoint;
use crate::training::loss::{joint_loss, neg_si_snr_node, pit_loss, TrainExample};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every_epochs: u32,
    /// Extraction segment length; recordings shorter than this are used
    /// whole. The inference module always sees the whole recording.
    pub segment_s: f64,
    pub dropout: f64,
    /// Freeze the inference module after this many validations without an
    /// improvement in the classification loss.
    pub early_stop_patience: Option<u32>,
    pub eval_every_epochs: u32,
    /// Hard cap on optimizer steps, for smoke runs.
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 8,
            lr: 1e-3,
            lr_decay_factor: 0.2,
            lr_decay_every_epochs: 20,
            segment_s: 4.0,
            dropout: 0.1,
            early_stop_patience: Some(10),
            eval_every_epochs: 1,
            max_steps: None,
            seed: 0,
            checkpoint_dir: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ValSnapshot {
    pub epoch: u32,
    pub step: u64,
    pub l_r: f64,
    pub l_c: f64,
    pub si_snr_improvement_db: f64,
    pub counting_accuracy: f64,
    pub micro_f1: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epochs_run: u32,
    pub steps: u64,
    /// Mean combined loss per optimizer step.
    pub step_losses: Vec<f64>,
    pub epoch_train_loss: Vec<f64>,
    pub val_history: Vec<ValSnapshot>,
    /// Per epoch after the first: fraction of training records whose chosen
    /// permutation changed relative to the previous epoch.
    pub perm_flip_fraction: Vec<f64>,
    pub inference_frozen_at_epoch: Option<u32>,
    pub best_val_si_snr_improvement_db: Option<f64>,
    pub best_val_l_c: Option<f64>,
    pub stopped_early: bool,
}

fn batches_grouped_by_count(
    records: &[LoadedRecord],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry(r.sources.len()).or_default().push(i);
    }
    let mut batches = Vec::new();
    for idxs in groups.values_mut() {
        idxs.shuffle(rng);
        for chunk in idxs.chunks(batch_size) {
            batches.push(chunk.to_vec());
        }
    }
    batches.shuffle(rng);
    batches
}

/// Pick a random training segment in which every reference waveform carries
/// some energy. Partially overlapped recordings have stretches where one
/// speaker is silent, and SI-SNR is undefined against an all-zero reference,
/// so silent windows are redrawn. Falls back to the least-silent candidate
/// if no attempt clears the floor.
fn segment(
    len: usize,
    segment_s: f64,
    sample_rate: u32,
    refs: &[&Waveform],
    rng: &mut ChaCha8Rng,
) -> (usize, usize) {
    const ATTEMPTS: usize = 8;
    const MEAN_ENERGY_FLOOR: f64 = 1e-8;
    let want = (segment_s * sample_rate as f64).round() as usize;
    let seg_len = want.min(len);
    if seg_len == len {
        return (0, seg_len);
    }
    let mut best_start = 0;
    let mut best_min = f64::NEG_INFINITY;
    for _ in 0..ATTEMPTS {
        let start = rng.gen_range(0..=len - seg_len);
        let min_energy = refs
            .iter()
            .map(|w| {
                w.samples[start..start + seg_len]
                    .iter()
                    .map(|x| x * x)
                    .sum::<f64>()
                    / seg_len as f64
            })
            .fold(f64::INFINITY, f64::min);
        if min_energy > MEAN_ENERGY_FLOOR {
            return (start, seg_len);
        }
        if min_energy > best_min {
            best_min = min_energy;
            best_start = start;
        }
    }
    (best_start, seg_len)
}

/// Joint training of the chain model. `stop` is consulted after every
/// validation pass and ends training when it returns true.
#[allow(clippy::too_many_arguments)]
pub fn train_sccm(
    store: &mut ParamStore,
    inference: &InferenceNet,
    extractor: &ExtractionNet,
    train: &[LoadedRecord],
    valid: &[LoadedRecord],
    stft: &StftConfig,
    cfg: &TrainConfig,
    mut stop: impl FnMut(&ValSnapshot) -> bool,
) -> Result<TrainingReport> {
    if train.is_empty() {
        return Err(SccmError::Validation("empty training set".into()));
    }
    let mut adam = Adam::new(AdamConfig::default(), store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd809_0a17);
    let mut report = TrainingReport::default();
    let mut prev_perms: Vec<Option<Vec<usize>>> = vec![None; train.len()];
    let mut best_l_c = f64::INFINITY;
    let mut best_imp = f64::NEG_INFINITY;
    let mut stale_validations = 0u32;
    let mut frozen = false;

    'outer: for epoch in 0..cfg.epochs {
        let lr = decayed_lr(cfg.lr, cfg.lr_decay_factor, cfg.lr_decay_every_epochs, epoch);
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        let mut flips = 0usize;
        let mut compared = 0usize;
        for batch in batches_grouped_by_count(train, cfg.batch_size, &mut rng) {
            let mut grads = store.zero_grads();
            let mut batch_loss = 0.0;
            for &idx in &batch {
                let r = &train[idx];
                let refs: Vec<&Waveform> = r.sources.iter().collect();
                let (seg_start, seg_len) =
                    segment(r.mixture.len(), cfg.segment_s, r.mixture.sample_rate, &refs, &mut rng);
                let ex = TrainExample {
                    mixture: &r.mixture,
                    sources: &r.sources,
                    speaker_classes: &r.speaker_ids,
                };
                let mut g = Graph::new();
                let drop = (cfg.dropout > 0.0 && !frozen).then(|| DropoutCtx {
                    rng: &mut drop_rng,
                    p: cfg.dropout,
                });
                let rl = joint_loss(
                    &mut g, store, inference, extractor, &ex, stft, seg_start, seg_len, drop,
                )?;
                let value = g.scalar(rl.total);
                if !value.is_finite() {
                    return Err(SccmError::Numeric(format!(
                        "non-finite loss at step {} on training records {:?}",
                        report.steps, batch
                    )));
                }
                if let Some(prev) = &prev_perms[idx] {
                    compared += 1;
                    if *prev != rl.perm {
                        flips += 1;
                    }
                }
                prev_perms[idx] = Some(rl.perm.clone());
                batch_loss += value;
                g.backward(rl.total, &mut grads);
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.step(store, &mut grads, lr);
            let mean = batch_loss / batch.len() as f64;
            report.step_losses.push(mean);
            epoch_loss += mean;
            epoch_batches += 1;
            report.steps += 1;
            if cfg.max_steps.is_some_and(|m| report.steps >= m) {
                report.epochs_run = epoch + 1;
                break 'outer;
            }
        }
        report.epoch_train_loss.push(epoch_loss / epoch_batches as f64);
        if compared > 0 {
            report.perm_flip_fraction.push(flips as f64 / compared as f64);
        }
        report.epochs_run = epoch + 1;

        if !valid.is_empty() && (epoch + 1) % cfg.eval_every_epochs == 0 {
            let snap = validate(store, inference, extractor, valid, stft, cfg, epoch, report.steps)?;
            let improved_l_c = snap.l_c < best_l_c - 1e-9;
            if improved_l_c {
                best_l_c = snap.l_c;
                stale_validations = 0;
                save_checkpoint(store, inference, extractor, stft, cfg, epoch, report.steps, "best_lc.json")?;
            } else {
                stale_validations += 1;
            }
            if snap.si_snr_improvement_db > best_imp {
                best_imp = snap.si_snr_improvement_db;
                save_checkpoint(
                    store, inference, extractor, stft, cfg, epoch, report.steps, "best_sisnri.json",
                )?;
            }
            if !frozen {
                if let Some(patience) = cfg.early_stop_patience {
                    if stale_validations > patience {
                        adam.freeze(ParamGroup::Inference);
                        frozen = true;
                        report.inference_frozen_at_epoch = Some(epoch);
                    }
                }
            }
            let done = stop(&snap);
            report.val_history.push(snap);
            if done {
                report.stopped_early = true;
                break;
            }
        }
    }
    report.best_val_l_c = (best_l_c.is_finite()).then_some(best_l_c);
    report.best_val_si_snr_improvement_db = (best_imp.is_finite()).then_some(best_imp);
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn validate(
    store: &ParamStore,
    inference: &InferenceNet,
    extractor: &ExtractionNet,
    valid: &[LoadedRecord],
    stft: &StftConfig,
    cfg: &TrainConfig,
    epoch: u32,
    step: u64,
) -> Result<ValSnapshot> {
    let mut l_r = 0.0;
    let mut l_c = 0.0;
    for r in valid {
        let want = (cfg.segment_s * r.mixture.sample_rate as f64).round() as usize;
        let seg_len = want.min(r.mixture.len());
        let ex = TrainExample {
            mixture: &r.mixture,
            sources: &r.sources,
            speaker_classes: &r.speaker_ids,
        };
        let mut g = Graph::new();
        let rl = joint_loss(&mut g, store, inference, extractor, &ex, stft, 0, seg_len, None)?;
        l_r += rl.l_r;
        l_c += rl.l_c;
    }
    let eval = evaluate(store, inference, extractor, stft, valid)?;
    Ok(ValSnapshot {
        epoch,
        step,
        l_r: l_r / valid.len() as f64,
        l_c: l_c / valid.len() as f64,
        si_snr_improvement_db: eval.mean_si_snr_improvement_db,
        counting_accuracy: eval.counting_accuracy,
        micro_f1: eval.micro_f1,
    })
}

#[allow(clippy::too_many_arguments)]
fn save_checkpoint(
    store: &ParamStore,
    inference: &InferenceNet,
    extractor: &ExtractionNet,
    stft: &StftConfig,
    cfg: &TrainConfig,
    epoch: u32,
    step: u64,
    name: &str,
) -> Result<()> {
    if let Some(dir) = &cfg.checkpoint_dir {
        Checkpoint::capture(
            store,
            &inference.vocab,
            stft,
            &inference.cfg,
            &extractor.cfg,
            epoch,
            step,
            None,
        )
        .save(&dir.join(name))?;
    }
    Ok(())
}

/// Mean SI-SNR-improvement of the fixed two-output baseline on a record,
/// under the best output permutation.
pub fn baseline_eval_record(
    store: &ParamStore,
    baseline: &ExtractionNet,
    record: &LoadedRecord,
) -> Result<f64> {
    let mut g = Graph::new();
    let stacked = baseline.extract(&mut g, store, &record.mixture.samples, None)?;
    let v = g.value(stacked);
    let estimates: Vec<Waveform> = (0..baseline.cfg.n_outputs)
        .map(|i| Waveform::new(v.row(i).to_vec(), record.mixture.sample_rate))
        .collect::<Result<_>>()?;
    let score = eval_separation(&record.mixture, &estimates, &record.sources)?;
    Ok(score.si_snr_improvement_db)
}

/// Permutation-invariant training of the fixed-output baseline. Every
/// record must have exactly as many sources as the head has outputs.
pub fn train_baseline(
    store: &mut ParamStore,
    baseline: &ExtractionNet,
    train: &[LoadedRecord],
    valid: &[LoadedRecord],
    cfg: &TrainConfig,
    mut stop: impl FnMut(&ValSnapshot) -> bool,
) -> Result<TrainingReport> {
    if train.is_empty() {
        return Err(SccmError::Validation("empty training set".into()));
    }
    for r in train.iter().chain(valid) {
        if r.sources.len() != baseline.cfg.n_outputs {
            return Err(SccmError::Validation(format!(
                "baseline with {} outputs got a record with {} sources",
                baseline.cfg.n_outputs,
                r.sources.len()
            )));
        }
    }
    let mut adam = Adam::new(AdamConfig::default(), store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainingReport::default();
    let mut best_imp = f64::NEG_INFINITY;

    'outer: for epoch in 0..cfg.epochs {
        let lr = decayed_lr(cfg.lr, cfg.lr_decay_factor, cfg.lr_decay_every_epochs, epoch);
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        for batch in batches_grouped_by_count(train, cfg.batch_size, &mut rng) {
            let mut grads = store.zero_grads();
            let mut batch_loss = 0.0;
            for &idx in &batch {
                let r = &train[idx];
                let source_refs: Vec<&Waveform> = r.sources.iter().collect();
                let (s0, sl) = segment(
                    r.mixture.len(),
                    cfg.segment_s,
                    r.mixture.sample_rate,
                    &source_refs,
                    &mut rng,
                );
                let refs: Vec<&[f64]> = r.sources.iter().map(|w| &w.samples[s0..s0 + sl]).collect();
                let mut g = Graph::new();
                let (loss, _) = pit_loss(&mut g, store, baseline, &r.mixture.samples[s0..s0 + sl], &refs)?;
                let value = g.scalar(loss);
                if !value.is_finite() {
                    return Err(SccmError::Numeric(format!(
                        "non-finite loss at step {} on training records {:?}",
                        report.steps, batch
                    )));
                }
                batch_loss += value;
                g.backward(loss, &mut grads);
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.step(store, &mut grads, lr);
            let mean = batch_loss / batch.len() as f64;
            report.step_losses.push(mean);
            epoch_loss += mean;
            epoch_batches += 1;
            report.steps += 1;
            if cfg.max_steps.is_some_and(|m| report.steps >= m) {
                report.epochs_run = epoch + 1;
                break 'outer;
            }
        }
        report.epoch_train_loss.push(epoch_loss / epoch_batches as f64);
        report.epochs_run = epoch + 1;

        if !valid.is_empty() && (epoch + 1) % cfg.eval_every_epochs == 0 {
            let mut imp = 0.0;
            for r in valid {
                imp += baseline_eval_record(store, baseline, r)?;
            }
            let snap = ValSnapshot {
                epoch,
                step: report.steps,
                l_r: report.epoch_train_loss[epoch as usize],
                l_c: 0.0,
                si_snr_improvement_db: imp / valid.len() as f64,
                counting_accuracy: 0.0,
                micro_f1: None,
            };
            best_imp = best_imp.max(snap.si_snr_improvement_db);
            let done = stop(&snap);
            report.val_history.push(snap);
            if done {
                report.stopped_early = true;
                break;
            }
        }
    }
    report.best_val_si_snr_improvement_db = (best_imp.is_finite()).then_some(best_imp);
    Ok(report)
}

/// One cascade training example: the mixture, the frozen stage-one
/// estimate, and the reference the estimate was assigned to.
pub struct CascadeExample {
    pub mixture: Waveform,
    pub estimate: Waveform,
    pub reference: Waveform,
}

/// Train the refinement stage on frozen stage-one outputs.
pub fn train_cascade(
    store: &mut ParamStore,
    cascade: &ExtractionNet,
    train: &[CascadeExample],
    valid: &[CascadeExample],
    cfg: &TrainConfig,
    mut stop: impl FnMut(&ValSnapshot) -> bool,
) -> Result<TrainingReport> {
    if train.is_empty() {
        return Err(SccmError::Validation("empty training set".into()));
    }
    let mut adam = Adam::new(AdamConfig::default(), store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainingReport::default();
    let mut best_imp = f64::NEG_INFINITY;

    'outer: for epoch in 0..cfg.epochs {
        let lr = decayed_lr(cfg.lr, cfg.lr_decay_factor, cfg.lr_decay_every_epochs, epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = store.zero_grads();
            let mut batch_loss = 0.0;
            for &idx in batch {
                let ex = &train[idx];
                let (s0, sl) = segment(
                    ex.mixture.len(),
                    cfg.segment_s,
                    ex.mixture.sample_rate,
                    &[&ex.reference],
                    &mut rng,
                );
                let mut g = Graph::new();
                let out = cascade.refine(
                    &mut g,
                    store,
                    &ex.mixture.samples[s0..s0 + sl],
                    &ex.estimate.samples[s0..s0 + sl],
                )?;
                let loss = neg_si_snr_node(&mut g, out, &ex.reference.samples[s0..s0 + sl]);
                let value = g.scalar(loss);
                if !value.is_finite() {
                    return Err(SccmError::Numeric(format!(
                        "non-finite loss at step {} on training records {:?}",
                        report.steps, batch
                    )));
                }
                batch_loss += value;
                g.backward(loss, &mut grads);
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.step(store, &mut grads, lr);
            let mean = batch_loss / batch.len() as f64;
            report.step_losses.push(mean);
            epoch_loss += mean;
            epoch_batches += 1;
            report.steps += 1;
            if cfg.max_steps.is_some_and(|m| report.steps >= m) {
                report.epochs_run = epoch + 1;
                break 'outer;
            }
        }
        report.epoch_train_loss.push(epoch_loss / epoch_batches as f64);
        report.epochs_run = epoch + 1;

        if !valid.is_empty() && (epoch + 1) % cfg.eval_every_epochs == 0 {
            let mut imp = 0.0;
            for ex in valid {
                let mut g = Graph::new();
                let out = cascade.refine(&mut g, store, &ex.mixture.samples, &ex.estimate.samples)?;
                let est = Waveform::new(g.value(out).row(0).to_vec(), ex.mixture.sample_rate)?;
                imp += crate::signal::si_snr_improvement(&ex.mixture, &est, &ex.reference)?;
            }
            let snap = ValSnapshot {
                epoch,
                step: report.steps,
                l_r: report.epoch_train_loss[epoch as usize],
                l_c: 0.0,
                si_snr_improvement_db: imp / valid.len() as f64,
                counting_accuracy: 0.0,
                micro_f1: None,
            };
            best_imp = best_imp.max(snap.si_snr_improvement_db);
            let done = stop(&snap);
            report.val_history.push(snap);
            if done {
                report.stopped_early = true;
                break;
            }
        }
    }
    report.best_val_si_snr_improvement_db = (best_imp.is_finite()).then_some(best_imp);
    Ok(report)
}
