//! Hallucination detection on full LLM activation tensors.
//!
//! The pipeline treats an activation tensor (layers x tokens x features) like
//! an image: max-pool the spatial axes to a fixed grid, project features into
//! a shared space with one linear adapter per source LLM, and classify with a
//! shared transformer backbone over activation patches. Alongside the model
//! live the classic comparison methods (per-position logistic probes,
//! logit/probability aggregators), a toy-transformer data generator with
//! plantable signals and permutation-symmetric clones, an on-disk dataset
//! format, and the training/transfer protocols that tie them together.

pub mod baselines;
pub mod error;
pub mod llm;
pub mod model;
pub mod nn;
pub mod report;
pub mod rng;
pub mod store;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

/// Collapse the global thread pool to a single thread. Used by reference
/// mode for strictly serial execution; results are bit-identical either
/// way, this just removes scheduling nondeterminism in wall-clock order.
pub fn force_serial() {
    let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
}
