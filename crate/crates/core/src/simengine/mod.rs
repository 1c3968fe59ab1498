//! Simulated micro-batch cluster: lever space, hidden ground truth, latency
//! model and monitoring metrics.

pub mod engine;
pub mod levers;
pub mod matrix;
pub mod truth;

pub use engine::{apply_config, expected_latency, percentile, run_window, ApplyReport, Engine, EngineParams, LatencyStats};
pub use levers::{default_space, Configuration, LeverKind, LeverSpace, LeverSpec, Provenance, BATCH_INTERVAL, DRIVER_MEMORY};
pub use matrix::MetricMatrix;
pub use truth::{plant_ground_truth, GroundTruth};
