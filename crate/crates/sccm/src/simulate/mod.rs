//! Synthetic-speaker corpus generation: speakers, mixtures, datasets.

pub mod dataset;
pub mod mixer;
pub mod speaker;

pub use dataset::{
    build_dataset, generate_record, load_record, manifest_path, open_condition_speakers,
    training_speakers, DatasetConfig, LoadedRecord, Manifest, ManifestRecord, MixtureSpec,
};
pub use mixer::{mix_fully_overlapped, simulate_multiround, MixtureRecord, MultiRoundConfig, Placement};
pub use speaker::{speaker_grid, synth_utterance, SyntheticSpeaker};
