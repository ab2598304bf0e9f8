//! Minimal reverse-mode autodiff and optimizer used by both networks.

pub mod adam;
pub mod graph;
pub mod param;

pub use adam::{decayed_lr, Adam, AdamConfig, AdamState};
pub use graph::{Graph, NodeId};
pub use param::{xavier, GradStore, ParamGroup, ParamId, ParamStore};
