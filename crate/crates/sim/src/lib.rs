//! Ground-truth simulator of a containerized stream-processing runtime.
//!
//! Instances and per-container stream managers are queueing servers that share their
//! container's cores. Runs report the achieved source rate, a stability verdict and the
//! per-instance metrics a live cluster would export.

pub mod emit;
pub mod engine;
pub mod error;
pub mod scenarios;
pub mod search;
pub mod training;
pub mod truth;

pub use emit::emit_synthetic_metrics;
pub use engine::{simulate, simulate_schedule, RateSchedule, SimCounters, SimOptions, SimResult};
pub use error::{Error, Result};
pub use search::{find_max_rate, MaxRate, SearchOptions};
pub use truth::{GcTruth, GroundTruth, NodeTruth, SmTruth};
