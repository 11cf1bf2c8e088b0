//! Run a pipeline from a YAML config that writes LSC1 files, then replay
//! those files through a second pipeline.
//!
//! cargo run --example file_pipeline

use detstream::pipeline::{load_pipeline, MemoryHandler, WorkerInfo};
use detstream::wire::validate_config;

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let text = format!(
        r#"
lclstreamer:
  event_source: SyntheticEventSource
  processing_pipeline: BatchProcessingPipeline
  data_serializer: Lsc1Serializer
  data_handlers: [BinaryFileWritingDataHandler]
event_source:
  SyntheticEventSource: {{ seed: 3, max_events: 95 }}
processing_pipeline:
  BatchProcessingPipeline: {{ batch_size: 20 }}
data_serializer:
  Lsc1Serializer: {{ compression: none }}
data_handlers:
  BinaryFileWritingDataHandler: {{ directory: {}, filename_pattern: "r{{run_id}}_{{seq:04}}.lsc1", run_id: "0042" }}
data_sources:
  timestamp: {{ type: SyntheticTimestamp }}
  gmd: {{ type: SyntheticScalar, dtype: f64 }}
"#,
        out.display()
    );
    let cfg = validate_config(&text).unwrap();
    let s = load_pipeline(&cfg, WorkerInfo::single()).unwrap().run().unwrap();
    println!("{}", serde_json::to_string_pretty(&s).unwrap());
    let mut files: Vec<_> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    for f in &files {
        println!("{}", f.display());
    }

    let replay = text
        .replace(
            "SyntheticEventSource: { seed: 3, max_events: 95 }",
            &format!("FileReplayEventSource: {{ path: {} }}", out.display()),
        )
        .replace("event_source: SyntheticEventSource", "event_source: FileReplayEventSource")
        .replace("timestamp: { type: SyntheticTimestamp }", "timestamp: { type: FileReplay, field: /data/timestamp }")
        .replace("gmd: { type: SyntheticScalar, dtype: f64 }", "gmd: { type: FileReplay, field: /data/gmd }")
        .replace(&format!("directory: {}", out.display()), &format!("directory: {}", dir.path().join("replay").display()));
    let cfg = validate_config(&replay).unwrap();
    let mut p = load_pipeline(&cfg, WorkerInfo::single()).unwrap();
    let mem = MemoryHandler::default();
    p.add_handler(Box::new(mem.clone()));
    let s = p.run().unwrap();
    println!("replayed {} events into {} batches", s.events_read, mem.blobs.lock().len());
}
