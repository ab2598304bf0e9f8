//! Command-line driver: corpus simulation, training, evaluation, single-file
//! separation, and attention visualization.
//!
//! Errors print a machine-readable JSON object on stderr and map to exit
//! codes: 2 for configuration problems, 3 for data problems, 4 otherwise.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use sccm::config::ExperimentConfig;
use sccm::error::SccmError;
use sccm::eval::{evaluate, export_attention, separate_record};
use sccm::extraction::ExtractionNet;
use sccm::inference::{InferenceNet, SpeakerVocabulary};
use sccm::nn::{ParamGroup, ParamStore};
use sccm::signal::{stft_magnitude, Waveform};
use sccm::simulate::{build_dataset, load_record, manifest_path, LoadedRecord, Manifest};
use sccm::training::{train_sccm, Checkpoint};

#[derive(Parser)]
#[command(name = "sccm", version, about = "Speaker-conditional chain model")]
struct Cli {
    /// Path to the experiment TOML.
    #[arg(long, global = true, default_value = "experiment.toml")]
    config: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the corpus described by the config's dataset section.
    Simulate {
        /// Overwrite an existing corpus.
        #[arg(long)]
        force: bool,
    },
    /// Train the chain model on the generated corpus.
    Train,
    /// Evaluate a checkpoint on one corpus split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Separate one WAV file with a trained checkpoint.
    Separate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "separated")]
        out_dir: PathBuf,
    },
    /// Export per-step attention status for one WAV file.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "attention")]
        out_dir: PathBuf,
    },
}

fn main() {
    let code = match run() {
        Ok(()) => 0,
        Err(err) => {
            let code = err
                .downcast_ref::<SccmError>()
                .map(|e| e.exit_code())
                .unwrap_or(4);
            eprintln!(
                "{}",
                serde_json::json!({ "error": format!("{err:#}"), "exit_code": code })
            );
            code
        }
    };
    std::process::exit(code);
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let cfg = ExperimentConfig::load(&cli.config)?;
    let started = chrono::Utc::now();
    match &cli.command {
        Command::Simulate { force } => simulate(&cfg, *force)?,
        Command::Train => train(&cfg)?,
        Command::Evaluate { checkpoint, split } => evaluate_cmd(&cfg, checkpoint, split)?,
        Command::Separate {
            checkpoint,
            input,
            out_dir,
        } => separate_cmd(&cfg, checkpoint, input, out_dir)?,
        Command::Visualize {
            checkpoint,
            input,
            out_dir,
        } => visualize_cmd(&cfg, checkpoint, input, out_dir)?,
    }
    write_run_manifest(&cli, &cfg, started)?;
    Ok(())
}

/// Record what ran and with what inputs, for reproducibility.
fn write_run_manifest(
    cli: &Cli,
    cfg: &ExperimentConfig,
    started: chrono::DateTime<chrono::Utc>,
) -> anyhow::Result<()> {
    let config_text = std::fs::read_to_string(&cli.config)
        .with_context(|| format!("re-reading {}", cli.config.display()))?;
    let command = match &cli.command {
        Command::Simulate { .. } => "simulate",
        Command::Train => "train",
        Command::Evaluate { .. } => "evaluate",
        Command::Separate { .. } => "separate",
        Command::Visualize { .. } => "visualize",
    };
    let manifest = serde_json::json!({
        "command": command,
        "config_path": cli.config.display().to_string(),
        "config_sha256": format!("{:x}", Sha256::digest(config_text.as_bytes())),
        "config": cfg,
        "dataset_seed": cfg.dataset.seed,
        "train_seed": cfg.train.seed,
        "started_at": started.to_rfc3339(),
        "finished_at": chrono::Utc::now().to_rfc3339(),
    });
    std::fs::create_dir_all(&cfg.output_dir)?;
    let path = cfg.output_dir.join("run_manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn simulate(cfg: &ExperimentConfig, force: bool) -> anyhow::Result<()> {
    let manifest = build_dataset(&cfg.dataset, &cfg.data_dir, force)?;
    let hash = manifest.corpus_hash(&cfg.data_dir)?;
    println!(
        "{}",
        serde_json::json!({
            "records": manifest.records.len(),
            "corpus_hash": hash,
            "data_dir": cfg.data_dir.display().to_string(),
        })
    );
    Ok(())
}

fn load_split(cfg: &ExperimentConfig, split: &str) -> anyhow::Result<Vec<LoadedRecord>> {
    let manifest = Manifest::load(manifest_path(&cfg.data_dir))
        .with_context(|| format!("no corpus in {} (run `sccm simulate` first)", cfg.data_dir.display()))?;
    let records = manifest
        .split(split)
        .into_iter()
        .map(|r| load_record(&cfg.data_dir, r))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(records)
}

/// Build the model pair with the deterministic initialization used by both
/// training and checkpoint restoration.
fn build_models(cfg: &ExperimentConfig) -> (ParamStore, InferenceNet, ExtractionNet) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut store = ParamStore::new();
    let vocab = SpeakerVocabulary::new(cfg.dataset.n_train_speakers);
    let inference = InferenceNet::new(cfg.inference_net.clone(), vocab, &mut store, &mut rng);
    let extractor = ExtractionNet::new(
        cfg.extraction_net.clone(),
        ParamGroup::Extraction,
        "extractor",
        &mut store,
        &mut rng,
    );
    (store, inference, extractor)
}

fn restore_models(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
) -> anyhow::Result<(ParamStore, InferenceNet, ExtractionNet)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let inference = InferenceNet::new(
        ckpt.inference_cfg.clone(),
        ckpt.vocab.clone(),
        &mut store,
        &mut rng,
    );
    let extractor = ExtractionNet::new(
        ckpt.extractor_cfg.clone(),
        ParamGroup::Extraction,
        "extractor",
        &mut store,
        &mut rng,
    );
    ckpt.restore_into(&mut store)?;
    if ckpt.stft != cfg.stft {
        return Err(SccmError::Validation(
            "checkpoint was trained with a different spectrogram configuration".into(),
        )
        .into());
    }
    Ok((store, inference, extractor))
}

fn train(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let train_records = load_split(cfg, "train")?;
    let valid_records = load_split(cfg, "valid")?;
    let (mut store, inference, extractor) = build_models(cfg);
    let mut tc = cfg.train.clone();
    tc.checkpoint_dir = Some(cfg.output_dir.clone());
    let report = train_sccm(
        &mut store,
        &inference,
        &extractor,
        &train_records,
        &valid_records,
        &cfg.stft,
        &tc,
        |_| false,
    )?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let report_path = cfg.output_dir.join("training_report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    // Always leave a final checkpoint, even without a validation split.
    Checkpoint::capture(
        &store,
        &inference.vocab,
        &cfg.stft,
        &inference.cfg,
        &extractor.cfg,
        report.epochs_run,
        report.steps,
        None,
    )
    .save(&cfg.output_dir.join("final.json"))?;
    println!(
        "{}",
        serde_json::json!({
            "epochs": report.epochs_run,
            "steps": report.steps,
            "best_val_si_snr_improvement_db": report.best_val_si_snr_improvement_db,
            "best_val_l_c": report.best_val_l_c,
            "report": report_path.display().to_string(),
        })
    );
    Ok(())
}

fn evaluate_cmd(cfg: &ExperimentConfig, checkpoint: &Path, split: &str) -> anyhow::Result<()> {
    let records = load_split(cfg, split)?;
    let (store, inference, extractor) = restore_models(cfg, checkpoint)?;
    let report = evaluate(&store, &inference, &extractor, &cfg.stft, &records)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let path = cfg.output_dir.join(format!("eval_{split}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn separate_cmd(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    input: &Path,
    out_dir: &Path,
) -> anyhow::Result<()> {
    let mixture = Waveform::load_wav(input)?;
    let (store, inference, extractor) = restore_models(cfg, checkpoint)?;
    let (estimates, classes, truncated) =
        separate_record(&store, &inference, &extractor, &cfg.stft, &mixture)?;
    std::fs::create_dir_all(out_dir)?;
    let mut paths = Vec::new();
    for (i, est) in estimates.iter().enumerate() {
        let path = out_dir.join(format!("speaker_{}.wav", i + 1));
        est.save_wav(&path)?;
        paths.push(path.display().to_string());
    }
    println!(
        "{}",
        serde_json::json!({
            "n_speakers": estimates.len(),
            "speaker_classes": classes,
            "truncated": truncated,
            "outputs": paths,
        })
    );
    Ok(())
}

fn visualize_cmd(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    input: &Path,
    out_dir: &Path,
) -> anyhow::Result<()> {
    let mixture = Waveform::load_wav(input)?;
    let (store, inference, _) = restore_models(cfg, checkpoint)?;
    let spec = stft_magnitude(&mixture, &cfg.stft)?;
    let out = inference.infer_speakers(&store, &spec)?;
    std::fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    for (i, step) in out.steps.iter().enumerate() {
        let csv = out_dir.join(format!("step_{}.csv", i + 1));
        let png = out_dir.join(format!("step_{}.png", i + 1));
        export_attention(&step.attention_status, &csv, &png)?;
        files.push(csv.display().to_string());
        files.push(png.display().to_string());
    }
    println!(
        "{}",
        serde_json::json!({
            "n_steps": out.steps.len(),
            "truncated": out.truncated,
            "outputs": files,
        })
    );
    Ok(())
}
