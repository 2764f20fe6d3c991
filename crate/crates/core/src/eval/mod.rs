//! Answer parsing, scoring, baselines, and memory profiling.

mod metrics;
pub mod profile;
mod tokenized;

pub use metrics::*;
pub use tokenized::*;
