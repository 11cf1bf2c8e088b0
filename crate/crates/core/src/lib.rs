//! Detector data streaming toolkit.
//!
//! - [`wire`]: frame format, LSC1 batch container, pipeline configuration
//! - [`relay`]: many-producer / many-consumer at-most-once frame relay
//! - [`pipeline`]: event source → extraction → batching → serializer → handlers
//! - [`jobs`]: file-backed job store, local runner, callbacks, REST API
//! - [`transfer`]: transfer-control service and its state machine
//! - [`identity`]: Ed25519 certificates, trust stores, mutual TLS, HMAC signing
//! - [`bench`]: throughput and scaled end-to-end experiment harness
//!
//! The runnable programs under `examples/` walk through each of these.

pub mod wire;
pub mod identity;
pub mod relay;
pub mod net;
pub mod bench;
pub mod pipeline;
pub mod jobs;
pub mod transfer;
pub mod cli;
