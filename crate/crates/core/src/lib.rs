//! Core laboratory for measuring how small transformers generalize a
//! held-out feature combination: via a sparse single-feature rule or via
//! similarity to stored exemplars.
//!
//! The crate covers the full synthetic pipeline: Gaussian-cluster stimulus
//! generation ([`stimuli`]), a tape-based autodiff engine ([`tensor`]), a
//! small trainable transformer ([`model`]), the Adam training loop with
//! in-training evaluation ([`trainer`]), and outcome classification plus
//! the two analytic decision-model oracles ([`eval`]).
//!
//! Everything is deterministic given seeds: the `parallel` feature (on by
//! default) parallelizes the data-parallel inner loops with rayon without
//! changing any result bit.

pub mod checkpoint;
pub mod dataset;
pub mod eval;
pub mod gradcheck;
pub mod model;
mod parallel;
pub mod rng;
pub mod stimuli;
pub mod tensor;
pub mod trainer;
