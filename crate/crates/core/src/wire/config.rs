//! Pipeline configuration document and its validator.
//!
//! The document is YAML or JSON with this shape:
//!
//! ```yaml
//! lclstreamer:
//!   event_source: SyntheticEventSource
//!   processing_pipeline: BatchProcessingPipeline
//!   data_serializer: Lsc1Serializer
//!   data_handlers: [BinaryFileWritingDataHandler]
//! event_source:
//!   SyntheticEventSource: { seed: 1, max_events: 100 }
//! processing_pipeline:
//!   BatchProcessingPipeline: { batch_size: 10 }
//! data_serializer:
//!   Lsc1Serializer:
//!     compression: deflate
//!     compression_level: 3
//!     fields: { timestamp: /data/timestamp }
//! data_handlers:
//!   BinaryFileWritingDataHandler: { directory: out }
//! data_sources:
//!   timestamp: { type: SyntheticTimestamp }
//! ```
//!
//! Validation collects every problem it finds, each tagged with a path into
//! the document, instead of stopping at the first.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::container::DType;

pub const EVENT_SOURCES: &[&str] = &["SyntheticEventSource", "FileReplayEventSource"];
pub const PROCESSING_PIPELINES: &[&str] = &["BatchProcessingPipeline"];
pub const DATA_SERIALIZERS: &[&str] = &["Lsc1Serializer"];
pub const DATA_HANDLERS: &[&str] = &["BinaryFileWritingDataHandler", "BinaryDataStreamingDataHandler"];
pub const DATA_SOURCE_TYPES: &[&str] = &[
    "SyntheticTimestamp",
    "SyntheticAreaDetector",
    "SyntheticScalar",
    "SyntheticEventId",
    "SystemTimestamp",
    "FileReplay",
];

/// One validation problem, located by a `/`-separated path into the document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// Every problem found in a document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigErrors(pub Vec<ConfigError>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

impl ConfigErrors {
    pub fn mentions(&self, needle: &str) -> bool {
        self.0.iter().any(|e| e.message.contains(needle) || e.path.contains(needle))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSourceParams {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub max_events: Option<u64>,
    /// Events per second; unlimited when absent.
    #[serde(default)]
    pub rate: Option<f64>,
    /// Token bucket depth; defaults to one second of events.
    #[serde(default)]
    pub burst: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileReplayParams {
    /// An LSC1 file, or a directory whose `*.lsc1` files are replayed in name order.
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", content = "params")]
pub enum EventSourceConfig {
    SyntheticEventSource(SyntheticSourceParams),
    FileReplayEventSource(FileReplayParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchParams {
    #[serde(default = "default_batch_size")]
    pub batch_size: i64,
}

fn default_batch_size() -> i64 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CompressionName {
    #[default]
    None,
    Deflate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lsc1SerializerParams {
    #[serde(default)]
    pub compression: CompressionName,
    #[serde(default = "default_level")]
    pub compression_level: u32,
    /// Data source name to container path. Unlisted sources go to `/data/<name>`.
    #[serde(default)]
    pub fields: BTreeMap<String, String>,
}

fn default_level() -> u32 {
    3
}

impl Default for Lsc1SerializerParams {
    fn default() -> Self {
        Lsc1SerializerParams {
            compression: CompressionName::None,
            compression_level: default_level(),
            fields: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileHandlerParams {
    pub directory: PathBuf,
    #[serde(default = "default_pattern")]
    pub filename_pattern: String,
    #[serde(default = "default_run_id")]
    pub run_id: String,
}

fn default_pattern() -> String {
    "batch_{seq:05}.lsc1".into()
}

fn default_run_id() -> String {
    "run".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DisconnectPolicy {
    #[default]
    Block,
    Drop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamTlsParams {
    /// Directory holding this client's identity.
    pub identity: PathBuf,
    /// PEM certificate of the issuer the relay must chain to.
    pub issuer: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamHandlerParams {
    pub endpoint: String,
    /// Reconnect attempts after a failure; unlimited when absent.
    #[serde(default)]
    pub max_attempts: Option<u32>,
    #[serde(default = "default_backoff_base")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_backoff_cap")]
    pub backoff_cap_ms: u64,
    #[serde(default)]
    pub on_disconnect: DisconnectPolicy,
    #[serde(default)]
    pub tls: Option<StreamTlsParams>,
}

fn default_backoff_base() -> u64 {
    100
}

fn default_backoff_cap() -> u64 {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", content = "params")]
pub enum HandlerConfig {
    BinaryFileWritingDataHandler(FileHandlerParams),
    BinaryDataStreamingDataHandler(StreamHandlerParams),
}

impl HandlerConfig {
    pub fn name(&self) -> &'static str {
        match self {
            HandlerConfig::BinaryFileWritingDataHandler(_) => "BinaryFileWritingDataHandler",
            HandlerConfig::BinaryDataStreamingDataHandler(_) => "BinaryDataStreamingDataHandler",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TimestampParams {
    #[serde(default = "default_period")]
    pub period_ns: u64,
}

fn default_period() -> u64 {
    1_000_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AreaDetectorParams {
    #[serde(default = "default_shape")]
    pub shape: Vec<u64>,
    #[serde(default = "default_f32")]
    pub dtype: DType,
    #[serde(default)]
    pub calibration: bool,
    #[serde(default = "one")]
    pub gain: f64,
    #[serde(default)]
    pub offset: f64,
    #[serde(default)]
    pub seed: u64,
    /// Probability that reading this source fails for an event.
    #[serde(default)]
    pub failure_rate: f64,
}

fn default_shape() -> Vec<u64> {
    vec![32, 32]
}

fn default_f32() -> DType {
    DType::F32
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalarParams {
    #[serde(default = "default_f64")]
    pub dtype: DType,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub failure_rate: f64,
}

fn default_f64() -> DType {
    DType::F64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileReplaySourceParams {
    /// Container path of the replayed field, e.g. `/data/timestamp`.
    pub field: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum DataSourceKind {
    SyntheticTimestamp(TimestampParams),
    SyntheticAreaDetector(AreaDetectorParams),
    SyntheticScalar(ScalarParams),
    SyntheticEventId(Empty),
    SystemTimestamp(Empty),
    FileReplay(FileReplaySourceParams),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Empty {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSourceSpec {
    pub name: String,
    pub kind: DataSourceKind,
}

/// Engine-wide settings that live beside the component selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineParams {
    /// Abort when more than this fraction of events fail to read.
    pub skip_rate_abort: f64,
}

impl Default for EngineParams {
    fn default() -> Self {
        EngineParams { skip_rate_abort: 0.1 }
    }
}

/// A fully validated pipeline configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub event_source: EventSourceConfig,
    pub batch: BatchParams,
    pub serializer: Lsc1SerializerParams,
    pub handlers: Vec<HandlerConfig>,
    pub data_sources: BTreeMap<String, DataSourceSpec>,
    pub engine: EngineParams,
}

impl PipelineConfig {
    pub fn batch_size(&self) -> usize {
        self.batch.batch_size.max(1) as usize
    }

    /// Container path each data source is written under.
    pub fn field_path(&self, source: &str) -> String {
        self.serializer
            .fields
            .get(source)
            .cloned()
            .unwrap_or_else(|| format!("/data/{source}"))
    }

    /// Renders the configuration back into the document shape it was read from.
    pub fn to_document(&self) -> Value {
        let mut doc = Map::new();
        let (src_name, src_params) = match &self.event_source {
            EventSourceConfig::SyntheticEventSource(p) => ("SyntheticEventSource", to_json(p)),
            EventSourceConfig::FileReplayEventSource(p) => ("FileReplayEventSource", to_json(p)),
        };
        let handler_names: Vec<Value> = self.handlers.iter().map(|h| Value::from(h.name())).collect();
        doc.insert(
            "lclstreamer".into(),
            serde_json::json!({
                "event_source": src_name,
                "processing_pipeline": "BatchProcessingPipeline",
                "data_serializer": "Lsc1Serializer",
                "data_handlers": handler_names,
                "skip_rate_abort": self.engine.skip_rate_abort,
            }),
        );
        doc.insert("event_source".into(), serde_json::json!({ src_name: src_params }));
        doc.insert(
            "processing_pipeline".into(),
            serde_json::json!({ "BatchProcessingPipeline": to_json(&self.batch) }),
        );
        doc.insert(
            "data_serializer".into(),
            serde_json::json!({ "Lsc1Serializer": to_json(&self.serializer) }),
        );
        let mut handlers = Map::new();
        for h in &self.handlers {
            let params = match h {
                HandlerConfig::BinaryFileWritingDataHandler(p) => to_json(p),
                HandlerConfig::BinaryDataStreamingDataHandler(p) => to_json(p),
            };
            handlers.insert(h.name().into(), params);
        }
        doc.insert("data_handlers".into(), Value::Object(handlers));
        let sources: Map<String, Value> = self
            .data_sources
            .iter()
            .map(|(k, s)| (k.clone(), to_json(&s.kind)))
            .collect();
        doc.insert("data_sources".into(), Value::Object(sources));
        Value::Object(doc)
    }
}

fn to_json<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("config types serialise")
}

struct Collector(Vec<ConfigError>);

impl Collector {
    fn push(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.0.push(ConfigError {
            path: path.into(),
            message: message.into(),
        });
    }

    fn params<T: DeserializeOwned>(&mut self, path: &str, v: Value) -> Option<T> {
        match serde_json::from_value(v) {
            Ok(p) => Some(p),
            Err(e) => {
                self.push(path, e.to_string());
                None
            }
        }
    }
}

fn unknown(kind: &str, name: &str, registered: &[&str]) -> String {
    format!(
        "unknown component {kind} {name:?}; registered: {}",
        registered.join(", ")
    )
}

/// Parses YAML or JSON text and validates it.
pub fn validate_config(text: &str) -> Result<PipelineConfig, ConfigErrors> {
    let doc: Value = serde_yaml::from_str(text).map_err(|e| {
        ConfigErrors(vec![ConfigError {
            path: "/".into(),
            message: format!("not a YAML or JSON document: {e}"),
        }])
    })?;
    validate_document(&doc)
}

/// Validates an already parsed document.
pub fn validate_document(doc: &Value) -> Result<PipelineConfig, ConfigErrors> {
    let mut errs = Collector(Vec::new());
    let Some(root) = doc.as_object() else {
        return Err(ConfigErrors(vec![ConfigError {
            path: "/".into(),
            message: "document must be a mapping".into(),
        }]));
    };

    let selection = root.get("lclstreamer").and_then(Value::as_object);
    if selection.is_none() {
        errs.push("/lclstreamer", "missing section");
    }
    let empty = Map::new();
    let selection = selection.unwrap_or(&empty);

    let pick = |errs: &mut Collector, key: &str| -> Option<String> {
        match selection.get(key) {
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => {
                errs.push(format!("/lclstreamer/{key}"), "must be a component name");
                None
            }
            None => {
                if root.contains_key("lclstreamer") {
                    errs.push(format!("/lclstreamer/{key}"), "missing component selection");
                }
                None
            }
        }
    };

    // Parameters for a selected component, from `<section>/<name>`.
    let section_params = |section: &str, name: &str| -> Value {
        root.get(section)
            .and_then(|s| s.get(name))
            .cloned()
            .filter(|v| !v.is_null())
            .unwrap_or_else(|| Value::Object(Map::new()))
    };

    let mut engine = EngineParams::default();
    if let Some(v) = selection.get("skip_rate_abort") {
        match v.as_f64() {
            Some(f) if (0.0..=1.0).contains(&f) => engine.skip_rate_abort = f,
            _ => errs.push("/lclstreamer/skip_rate_abort", "must be a fraction between 0 and 1"),
        }
    }

    let event_source = pick(&mut errs, "event_source").and_then(|name| {
        let path = format!("/event_source/{name}");
        match name.as_str() {
            "SyntheticEventSource" => errs
                .params::<SyntheticSourceParams>(&path, section_params("event_source", &name))
                .and_then(|p| {
                    if let Some(r) = p.rate {
                        if r.is_nan() || r <= 0.0 {
                            errs.push(format!("{path}/rate"), "must be positive");
                            return None;
                        }
                    }
                    Some(EventSourceConfig::SyntheticEventSource(p))
                }),
            "FileReplayEventSource" => errs
                .params(&path, section_params("event_source", &name))
                .map(EventSourceConfig::FileReplayEventSource),
            other => {
                errs.push("/lclstreamer/event_source", unknown("event_source", other, EVENT_SOURCES));
                None
            }
        }
    });

    let batch = pick(&mut errs, "processing_pipeline").and_then(|name| match name.as_str() {
        "BatchProcessingPipeline" => {
            let path = format!("/processing_pipeline/{name}");
            errs.params::<BatchParams>(&path, section_params("processing_pipeline", &name))
                .and_then(|p| {
                    if p.batch_size < 1 {
                        errs.push(format!("{path}/batch_size"), "batch size must be at least 1");
                        None
                    } else {
                        Some(p)
                    }
                })
        }
        other => {
            errs.push(
                "/lclstreamer/processing_pipeline",
                unknown("processing_pipeline", other, PROCESSING_PIPELINES),
            );
            None
        }
    });

    let serializer = pick(&mut errs, "data_serializer").and_then(|name| match name.as_str() {
        "Lsc1Serializer" => {
            let path = format!("/data_serializer/{name}");
            let mut params = section_params("data_serializer", &name);
            // A clearer message than serde's for the compression codecs we lack.
            if let Some(c) = params.get("compression").and_then(Value::as_str) {
                if c != "none" && c != "deflate" {
                    errs.push(
                        format!("{path}/compression"),
                        format!("unsupported compression {c:?}; supported: none, deflate"),
                    );
                    params.as_object_mut().unwrap().remove("compression");
                }
            }
            errs.params::<Lsc1SerializerParams>(&path, params).and_then(|p| {
                if p.compression_level > 9 {
                    errs.push(format!("{path}/compression_level"), "must be between 0 and 9");
                    None
                } else {
                    Some(p)
                }
            })
        }
        other => {
            errs.push(
                "/lclstreamer/data_serializer",
                unknown("data_serializer", other, DATA_SERIALIZERS),
            );
            None
        }
    });

    let mut handlers = Vec::new();
    match selection.get("data_handlers") {
        Some(Value::Array(names)) => {
            if names.is_empty() {
                errs.push("/lclstreamer/data_handlers", "at least one data handler is required");
            }
            for (i, n) in names.iter().enumerate() {
                let Some(name) = n.as_str() else {
                    errs.push(format!("/lclstreamer/data_handlers/{i}"), "must be a component name");
                    continue;
                };
                let path = format!("/data_handlers/{name}");
                match name {
                    "BinaryFileWritingDataHandler" => {
                        if let Some(p) = errs.params(&path, section_params("data_handlers", name)) {
                            handlers.push(HandlerConfig::BinaryFileWritingDataHandler(p));
                        }
                    }
                    "BinaryDataStreamingDataHandler" => {
                        if let Some(p) = errs.params::<StreamHandlerParams>(&path, section_params("data_handlers", name)) {
                            handlers.push(HandlerConfig::BinaryDataStreamingDataHandler(p));
                        }
                    }
                    other => errs.push(
                        format!("/lclstreamer/data_handlers/{i}"),
                        unknown("data_handler", other, DATA_HANDLERS),
                    ),
                }
            }
        }
        Some(_) => errs.push("/lclstreamer/data_handlers", "must be a list of component names"),
        None => {
            if root.contains_key("lclstreamer") {
                errs.push("/lclstreamer/data_handlers", "at least one data handler is required")
            }
        }
    }

    let mut data_sources = BTreeMap::new();
    match root.get("data_sources") {
        Some(Value::Object(map)) => {
            for (name, spec) in map {
                let path = format!("/data_sources/{name}");
                let ty = spec.get("type").and_then(Value::as_str);
                match ty {
                    None => errs.push(format!("{path}/type"), "missing data source type"),
                    Some(t) if !DATA_SOURCE_TYPES.contains(&t) => errs.push(
                        format!("{path}/type"),
                        unknown("data source type", t, DATA_SOURCE_TYPES),
                    ),
                    Some(_) => {
                        if let Some(kind) = errs.params::<DataSourceKind>(&path, spec.clone()) {
                            if let Some(msg) = check_source(&kind) {
                                errs.push(path.clone(), msg);
                            } else {
                                data_sources.insert(
                                    name.clone(),
                                    DataSourceSpec {
                                        name: name.clone(),
                                        kind,
                                    },
                                );
                            }
                        }
                    }
                }
            }
        }
        Some(_) => errs.push("/data_sources", "must be a mapping of named data sources"),
        None => errs.push("/data_sources", "missing section"),
    }

    if let (Some(ser), Some(Value::Object(map))) = (&serializer, root.get("data_sources")) {
        for (field, path) in &ser.fields {
            if !map.contains_key(field) {
                errs.push(
                    format!("/data_serializer/Lsc1Serializer/fields/{field}"),
                    format!("field {field:?} names no entry in data_sources"),
                );
            }
            if !path.starts_with('/') || path.contains('\0') {
                errs.push(
                    format!("/data_serializer/Lsc1Serializer/fields/{field}"),
                    format!("container path {path:?} must start with '/'"),
                );
            }
        }
        let mut seen = BTreeMap::new();
        for name in map.keys() {
            let p = ser.fields.get(name).cloned().unwrap_or_else(|| format!("/data/{name}"));
            if let Some(prev) = seen.insert(p.clone(), name.clone()) {
                errs.push(
                    "/data_serializer/Lsc1Serializer/fields",
                    format!("sources {prev:?} and {name:?} both map to {p}"),
                );
            }
        }
    }

    if !errs.0.is_empty() {
        return Err(ConfigErrors(errs.0));
    }
    Ok(PipelineConfig {
        event_source: event_source.expect("checked"),
        batch: batch.expect("checked"),
        serializer: serializer.expect("checked"),
        handlers,
        data_sources,
        engine,
    })
}

fn check_source(kind: &DataSourceKind) -> Option<String> {
    let rate_ok = |r: f64| (0.0..=1.0).contains(&r);
    match kind {
        DataSourceKind::SyntheticAreaDetector(p) => {
            if p.shape.is_empty() || p.shape.contains(&0) {
                Some("shape must have at least one non-zero dimension".into())
            } else if !rate_ok(p.failure_rate) {
                Some("failure_rate must be between 0 and 1".into())
            } else {
                None
            }
        }
        DataSourceKind::SyntheticScalar(p) if !rate_ok(p.failure_rate) => {
            Some("failure_rate must be between 0 and 1".into())
        }
        DataSourceKind::FileReplay(p) if !p.field.starts_with('/') => {
            Some("field must be a container path starting with '/'".into())
        }
        _ => None,
    }
}
