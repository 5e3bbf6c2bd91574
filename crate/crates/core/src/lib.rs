//! Core of the promptflow sectioned prompt optimizer.
//!
//! Everything in this crate is a pure computation over owned values: prompt
//! sections and their rendering, prompt-edit operator request builders and
//! response parsers, the section x operator transition matrix with its MSGD
//! and Sarsa updates, candidate retention, and task metrics. Nothing here does
//! IO; the `promptflow` crate wires these pieces to generation backends,
//! dataset files and the filesystem.
//!
//! The crate is `no_std` and only needs `alloc`.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(any(feature = "std", test))]
extern crate std;

pub mod experience;
pub mod generation;
pub mod json;
pub mod matrix;
pub mod metrics;
pub mod msgd;
pub mod operators;
pub mod prompt;
pub mod retention;
pub mod rng;
pub mod sarsa;
pub mod task;

pub use experience::{ExperienceError, ExperienceStore, EXPERIENCE_VERSION};
pub use generation::{GenerationRequest, Message, Role};
pub use matrix::{MatrixError, SelectionMode, SelectionPair, TransitionMatrix};
pub use metrics::{
    loss, parse_prediction, score, Answer, BadCase, MetricCell, MetricError, MetricReport,
    Objective, Prediction,
};
pub use msgd::{GradientObservation, MsgdConfig, MsgdError, UpdateRule};
pub use operators::{OperatorContext, OperatorError, OperatorId, OperatorOutcome};
pub use prompt::{Candidate, LineageEntry, MetaPrompt, PromptError, Section, SectionId};
pub use sarsa::{RewardMode, SarsaConfig, SarsaError};
pub use task::TaskKind;

/// Lower bound applied to every transition-matrix cell after an update.
///
/// A cell at zero could never be sampled again.
pub const Q_FLOOR: f64 = 1e-4;
