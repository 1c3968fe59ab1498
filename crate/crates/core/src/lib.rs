//! Configuration tuning for micro-batch stream processing: workload
//! generation, a simulated cluster, metric reduction, lever ranking and a
//! policy-gradient tuner.

pub mod discretiser;
pub mod error;
pub mod floats;
pub mod harness;
pub mod leverrank;
pub mod metrics;
pub mod rltuner;
pub mod simengine;
pub mod workload;

pub use error::{Error, Result, Stage};
pub use simengine::{Configuration, LeverSpace, MetricMatrix};
