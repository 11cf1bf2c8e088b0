//! Bounded many-producer / many-consumer frame relay.
//!
//! Producers connect to the ingest endpoint and write frames; consumers
//! connect to the egress endpoint and read them. Every frame goes to exactly
//! one consumer, in arrival order, round-robin across consumers. The relay
//! never looks inside a payload.

pub mod config;
pub mod dispatch;
pub mod queue;
pub mod server;
pub mod stats;

pub use config::{Capacity, RelayConfig, RelayTls, Window};
pub use dispatch::RoundRobin;
pub use queue::{Enqueued, OverflowPolicy, RelayQueue};
pub use server::{start_relay, RelayError, RelayHandle, RelayThread, StatsProbe};
pub use stats::RelayStats;
