//! Joint training of the chain model and its comparison systems.

pub mod checkpoint;
pub mod loss;
pub mod trainer;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use loss::{best_permutation, joint_loss, neg_si_snr_node, pit_loss, TrainExample, ALPHA};
pub use trainer::{
    baseline_eval_record, train_baseline, train_cascade, train_sccm, CascadeExample, TrainConfig,
    TrainingReport, ValSnapshot,
};
