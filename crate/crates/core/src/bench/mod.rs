//! Benchmarks over loopback: raw relay throughput and a scaled end-to-end run.

pub mod throughput;
pub mod tmo;

pub use throughput::{bench_throughput, BenchError, BenchReport, BenchScenario};
pub use tmo::{run_scaled_tmo, TmoReport, TmoScenario, WorkerMode};
