//! Class-incremental learning experiments built around dense knowledge
//! distillation over subsets of previously learned tasks.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] / [`optim`]: a small f64 reverse-mode autodiff core and SGD.
//! - [`model`]: an MLP encoder with an expandable classification head,
//!   immutable snapshots, and a binary checkpoint format.
//! - [`pool`]: the pool of learned tasks and the class groups derived from
//!   its nonempty task subsets.
//! - [`distill`]: classification and distillation losses (global, task-wise,
//!   full-dense, and random-dense variants) recorded on the tape.
//! - [`weighting`]: the adaptive loss weight combining a class-count ratio
//!   with a feature-space dissimilarity term.
//! - [`replay`]: herding-based exemplar selection and the replay store.
//! - [`data`]: synthetic Gaussian blob tasks, IDX image loading, and the
//!   class-to-task assignment.
//! - [`trainer`] / [`metrics`]: the incremental training loop and the
//!   accuracy / stability / flatness probes around it.
//! - [`config`] / [`commands`] / [`runner`]: JSON configuration, the
//!   operations behind the CLI, and parallel execution of independent runs.
//!
//! Every run is driven by explicit seeds and the training path is
//! single-threaded, so repeated runs with one resolved configuration produce
//! bit-identical metrics. Parallelism (the `parallel` feature) only fans out
//! independent runs and large kernels whose results do not depend on thread
//! count.

pub mod commands;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pool;
pub mod replay;
pub mod rng;
pub mod runner;
pub mod tensor;
pub mod trainer;
pub mod weighting;

pub use error::{Error, Result};
