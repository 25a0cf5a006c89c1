//! Capacity planning for stream-processing topologies: performance models, rate prediction
//! and container allocation.

pub mod allocator;
pub mod calibrator;
pub mod config;
pub mod dag;
pub mod error;
pub mod lp;
pub mod metrics;
pub mod model;
pub mod network;
pub mod regression;
pub mod solver;
pub mod trainer;

pub use config::{Configuration, ContainerDims, InstanceId};
pub use dag::{EdgeRateVector, EdgeSpec, Grouping, LogicalDag, NodeSpec, STREAM_MANAGER};
pub use error::{Error, Result};
pub use model::{Classification, ModelSet, NodeModel};
pub use solver::{predict_rate, BottleneckKind, Prediction};
