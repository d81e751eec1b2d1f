//! Benchmark harness for multi-agent debate protocols on multiple-choice
//! question answering.

pub mod backend;
pub mod datasets;
pub mod metrics;
pub mod model;
pub mod parsing;
pub mod prompts;
pub mod protocols;
pub mod runner;
