//! The streaming worker: read events, keep only the configured data, batch,
//! serialize to LSC1 and hand each blob to every configured handler.
//!
//! ```no_run
//! use detstream::pipeline::{load_pipeline, WorkerInfo};
//! use detstream::wire::validate_config;
//!
//! let cfg = validate_config(&std::fs::read_to_string("pipeline.yaml").unwrap()).unwrap();
//! let summary = load_pipeline(&cfg, WorkerInfo::single()).unwrap().run().unwrap();
//! println!("{} events in {} batches", summary.events_read, summary.batches_emitted);
//! ```

pub mod event;
pub mod handler;
pub mod source;

use std::collections::BTreeMap;
use std::sync::mpsc::{sync_channel, SyncSender};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Instant;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

pub use event::{calibrate, extract, Event, EventRecord, ExtractError};
pub use handler::{backoff_delay, expand_pattern, DataHandler, FileHandler, StreamHandler};
pub use source::{EventSource, FileReplayEventSource, SyntheticEventSource, TokenBucket};

use crate::wire::config::{CompressionName, DataSourceSpec, EventSourceConfig, HandlerConfig, Lsc1SerializerParams};
use crate::wire::{encode_container, Array, Batch, Compression, ContainerError, PipelineConfig};

/// Which slice of the source this worker owns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerInfo {
    pub index: u32,
    pub count: u32,
}

impl WorkerInfo {
    pub fn single() -> Self {
        WorkerInfo { index: 0, count: 1 }
    }

    pub fn new(index: u32, count: u32) -> Result<Self, PipelineError> {
        if count == 0 || index >= count {
            return Err(PipelineError::Load(format!("worker index {index} out of range for {count} workers")));
        }
        Ok(WorkerInfo { index, count })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("cannot load pipeline: {0}")]
    Load(String),
    #[error("event source failed: {0}")]
    Source(String),
    #[error("serializer failed: {0}")]
    Serialize(#[from] ContainerError),
    #[error("handler {name} failed: {error}")]
    Handler { name: String, error: String },
    #[error("{skipped} of {read} events skipped, above the abort threshold {threshold}")]
    SkipRate { skipped: u64, read: u64, threshold: f64 },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HandlerSummary {
    pub name: String,
    pub blobs: u64,
    /// Blobs discarded while disconnected (stream handler with the drop policy).
    pub dropped: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub events_read: u64,
    pub events_skipped: u64,
    pub batches_emitted: u64,
    /// Blob deliveries summed over handlers.
    pub blobs_handled: u64,
    pub bytes_serialized: u64,
    pub duration_seconds: f64,
    pub handlers: Vec<HandlerSummary>,
}

/// A run that stopped early, with what it managed before stopping.
#[derive(Debug, thiserror::Error)]
#[error("{error}")]
pub struct RunFailure {
    pub summary: RunSummary,
    #[source]
    pub error: PipelineError,
}

/// Per-event transform run between extraction and batching. Steps form a
/// chain; each may hold records back and release them later.
pub trait ProcessingStep: Send {
    fn push(&mut self, record: EventRecord, out: &mut Vec<EventRecord>);
    fn finish(&mut self, _out: &mut Vec<EventRecord>) {}
}

/// Groups consecutive records into batches of a fixed size.
#[derive(Debug)]
pub struct BatchProcessingPipeline {
    size: usize,
    pending: Vec<EventRecord>,
}

impl BatchProcessingPipeline {
    pub fn new(size: usize) -> Self {
        BatchProcessingPipeline {
            size: size.max(1),
            pending: Vec::with_capacity(size.max(1)),
        }
    }

    /// Adds a record, returning a full batch when one completes.
    pub fn push(&mut self, rec: EventRecord) -> Option<Vec<EventRecord>> {
        self.pending.push(rec);
        (self.pending.len() >= self.size).then(|| std::mem::replace(&mut self.pending, Vec::with_capacity(self.size)))
    }

    /// The final partial batch, if any records are left.
    pub fn flush(&mut self) -> Option<Vec<EventRecord>> {
        (!self.pending.is_empty()).then(|| std::mem::take(&mut self.pending))
    }
}

/// Stacks records into a batch and encodes it as LSC1.
#[derive(Debug, Clone)]
pub struct Lsc1Serializer {
    compression: Compression,
    paths: BTreeMap<String, String>,
}

impl Lsc1Serializer {
    pub fn new(p: &Lsc1SerializerParams, sources: &[DataSourceSpec]) -> Self {
        let compression = match p.compression {
            CompressionName::None => Compression::None,
            CompressionName::Deflate => Compression::Deflate {
                level: p.compression_level,
            },
        };
        let paths = sources
            .iter()
            .map(|s| {
                let path = p.fields.get(&s.name).cloned().unwrap_or_else(|| format!("/data/{}", s.name));
                (s.name.clone(), path)
            })
            .collect();
        Lsc1Serializer { compression, paths }
    }

    /// Container path for a data source.
    pub fn path_of(&self, source: &str) -> Option<&str> {
        self.paths.get(source).map(String::as_str)
    }

    pub fn to_batch(&self, records: &[EventRecord]) -> Result<Batch, ContainerError> {
        let mut batch = Batch::new();
        for (name, path) in &self.paths {
            let rows: Vec<Array> = records
                .iter()
                .map(|r| r.get(name).cloned())
                .collect::<Option<_>>()
                .ok_or_else(|| ContainerError::Format(format!("record lacks data source {name}")))?;
            batch.insert(path.clone(), Array::stack(&rows)?);
        }
        Ok(batch)
    }

    pub fn serialize(&self, records: &[EventRecord]) -> Result<Vec<u8>, ContainerError> {
        encode_container(&self.to_batch(records)?, self.compression)
    }
}

/// Keeps every blob in memory; handy for tests and examples.
#[derive(Debug, Clone, Default)]
pub struct MemoryHandler {
    pub blobs: Arc<Mutex<Vec<Vec<u8>>>>,
}

impl DataHandler for MemoryHandler {
    fn name(&self) -> &'static str {
        "MemoryHandler"
    }

    fn handle(&mut self, blob: &[u8]) -> Result<(), String> {
        self.blobs.lock().push(blob.to_vec());
        Ok(())
    }
}

pub struct Pipeline {
    source: Box<dyn EventSource>,
    specs: Vec<DataSourceSpec>,
    steps: Vec<Box<dyn ProcessingStep>>,
    batcher: BatchProcessingPipeline,
    serializer: Lsc1Serializer,
    handlers: Vec<Box<dyn DataHandler>>,
    skip_rate_abort: f64,
}

/// Builds every component named in the configuration. Anything that can be
/// checked before reading an event (replay files, output directories,
/// TLS material) is checked here.
pub fn load_pipeline(cfg: &PipelineConfig, worker: WorkerInfo) -> Result<Pipeline, PipelineError> {
    let source: Box<dyn EventSource> = match &cfg.event_source {
        EventSourceConfig::SyntheticEventSource(p) => Box::new(SyntheticEventSource::new(p, worker)),
        EventSourceConfig::FileReplayEventSource(p) => Box::new(FileReplayEventSource::new(p, worker)?),
    };
    let specs: Vec<DataSourceSpec> = cfg.data_sources.values().cloned().collect();
    let mut handlers: Vec<Box<dyn DataHandler>> = Vec::new();
    for h in &cfg.handlers {
        handlers.push(match h {
            HandlerConfig::BinaryFileWritingDataHandler(p) => Box::new(FileHandler::new(p, worker)?),
            HandlerConfig::BinaryDataStreamingDataHandler(p) => Box::new(StreamHandler::new(p)?),
        });
    }
    Ok(Pipeline {
        serializer: Lsc1Serializer::new(&cfg.serializer, &specs),
        source,
        specs,
        steps: Vec::new(),
        batcher: BatchProcessingPipeline::new(cfg.batch_size()),
        handlers,
        skip_rate_abort: cfg.engine.skip_rate_abort,
    })
}

struct HandlerWorker {
    tx: Option<SyncSender<Arc<Vec<u8>>>>,
    thread: JoinHandle<(HandlerSummary, Option<String>)>,
}

fn spawn_handler(mut h: Box<dyn DataHandler>) -> HandlerWorker {
    // Two blobs in flight lets serialization overlap delivery while
    // keeping per-handler order.
    let (tx, rx) = sync_channel::<Arc<Vec<u8>>>(2);
    let thread = std::thread::spawn(move || {
        let mut s = HandlerSummary {
            name: h.name().to_string(),
            ..Default::default()
        };
        for blob in rx {
            if let Err(e) = h.handle(&blob) {
                s.dropped = h.dropped();
                return (s, Some(e));
            }
            s.blobs += 1;
        }
        let err = h.finish().err();
        s.dropped = h.dropped();
        s.blobs -= s.dropped.min(s.blobs);
        (s, err)
    });
    HandlerWorker { tx: Some(tx), thread }
}

impl Pipeline {
    /// Appends a processing step ahead of batching.
    pub fn add_step(&mut self, step: Box<dyn ProcessingStep>) {
        self.steps.push(step);
    }

    pub fn add_handler(&mut self, handler: Box<dyn DataHandler>) {
        self.handlers.push(handler);
    }

    pub fn serializer(&self) -> &Lsc1Serializer {
        &self.serializer
    }

    /// Runs until the source is exhausted or something fails hard.
    pub fn run(self) -> Result<RunSummary, RunFailure> {
        let Pipeline {
            mut source,
            specs,
            mut steps,
            mut batcher,
            serializer,
            handlers,
            skip_rate_abort,
        } = self;
        let start = Instant::now();
        let mut summary = RunSummary::default();
        let mut workers: Vec<HandlerWorker> = handlers.into_iter().map(spawn_handler).collect();

        let mut emit = |records: Vec<EventRecord>, summary: &mut RunSummary| -> Result<(), PipelineError> {
            let blob = Arc::new(serializer.serialize(&records)?);
            summary.batches_emitted += 1;
            summary.bytes_serialized += blob.len() as u64;
            for w in &mut workers {
                let sent = w.tx.as_ref().is_some_and(|tx| tx.send(blob.clone()).is_ok());
                if !sent {
                    // The handler thread quit; its error is collected at join.
                    w.tx = None;
                    return Err(PipelineError::Handler {
                        name: String::new(),
                        error: String::new(),
                    });
                }
            }
            Ok(())
        };

        let mut result: Result<(), PipelineError> = (|| {
            while let Some(ev) = source.next_event()? {
                summary.events_read += 1;
                match extract(&ev, &specs) {
                    Ok(rec) => {
                        for r in run_steps(&mut steps, 0, vec![rec]) {
                            if let Some(b) = batcher.push(r) {
                                emit(b, &mut summary)?;
                            }
                        }
                    }
                    Err(e) => {
                        summary.events_skipped += 1;
                        tracing::debug!("{e}");
                    }
                }
                if summary.events_read >= 100 {
                    check_skips(&summary, skip_rate_abort)?;
                }
            }
            // Release whatever the steps still hold, in chain order.
            for i in 0..steps.len() {
                let mut held = Vec::new();
                steps[i].finish(&mut held);
                for r in run_steps(&mut steps, i + 1, held) {
                    if let Some(b) = batcher.push(r) {
                        emit(b, &mut summary)?;
                    }
                }
            }
            if let Some(b) = batcher.flush() {
                emit(b, &mut summary)?;
            }
            check_skips(&summary, skip_rate_abort)
        })();

        for w in workers.iter_mut() {
            w.tx = None;
        }
        let mut handler_error = None;
        for w in workers {
            let (s, err) = w.thread.join().unwrap_or_else(|_| {
                (HandlerSummary::default(), Some("handler thread panicked".to_string()))
            });
            summary.blobs_handled += s.blobs;
            if let (Some(error), None) = (err, &handler_error) {
                handler_error = Some(PipelineError::Handler {
                    name: s.name.clone(),
                    error,
                });
            }
            summary.handlers.push(s);
        }
        summary.duration_seconds = start.elapsed().as_secs_f64();
        // A handler failure is the root cause of the placeholder error from emit.
        if let Some(e) = handler_error {
            result = Err(e);
        }
        match result {
            Ok(()) => Ok(summary),
            Err(error) => Err(RunFailure { summary, error }),
        }
    }
}

fn run_steps(steps: &mut [Box<dyn ProcessingStep>], from: usize, mut stage: Vec<EventRecord>) -> Vec<EventRecord> {
    for step in steps[from..].iter_mut() {
        let mut next = Vec::new();
        for r in stage {
            step.push(r, &mut next);
        }
        stage = next;
    }
    stage
}

fn check_skips(s: &RunSummary, threshold: f64) -> Result<(), PipelineError> {
    if s.events_read > 0 && s.events_skipped as f64 / s.events_read as f64 > threshold {
        return Err(PipelineError::SkipRate {
            skipped: s.events_skipped,
            read: s.events_read,
            threshold,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests;
