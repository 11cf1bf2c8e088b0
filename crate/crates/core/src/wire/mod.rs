//! Byte formats shared by every component: relay frames, the LSC1 batch
//! container, and the pipeline configuration document.

pub mod config;
pub mod container;
pub mod frame;

pub use config::{validate_config, validate_document, ConfigError, ConfigErrors, PipelineConfig};
pub use container::{decode_container, encode_container, Array, Batch, Compression, ContainerError, DType};
pub use frame::{decode_frame, encode_frame, read_frame, write_frame, write_frame_async, FrameError, DEFAULT_MAX_FRAME};
