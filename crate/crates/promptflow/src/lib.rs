//! Prompt optimization with operator-selection matrices: LLM backends,
//! dataset loading, evaluation, the training loop and the command line.

pub mod backend;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod engine;
pub mod evaluation;
pub mod registry;
pub mod report;

pub use promptflow_core as core;
