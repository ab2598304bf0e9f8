//! Speaker-conditional chain model: infer a variable-length list of speaker
//! identities and embeddings from a recording, then extract each speaker's
//! source conditioned on its embedding.

extern crate blas_src;

pub mod config;
pub mod error;
pub mod eval;
pub mod extraction;
pub mod inference;
pub mod nn;
pub mod signal;
pub mod simulate;
pub mod training;
