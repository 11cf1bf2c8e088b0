use proptest::prelude::*;

use super::*;
use crate::relay::{start_relay, RelayConfig};
use crate::wire::{decode_container, validate_config};

fn config(events: u64, batch: i64, extra: &str) -> PipelineConfig {
    let text = format!(
        r#"
lclstreamer:
  event_source: SyntheticEventSource
  processing_pipeline: BatchProcessingPipeline
  data_serializer: Lsc1Serializer
  data_handlers: []
event_source:
  SyntheticEventSource: {{ seed: 1, max_events: {events} }}
processing_pipeline:
  BatchProcessingPipeline: {{ batch_size: {batch} }}
data_serializer:
  Lsc1Serializer: {{ compression: deflate }}
data_sources:
  timestamp: {{ type: SyntheticTimestamp }}
  id: {{ type: SyntheticEventId }}
  det: {{ type: SyntheticAreaDetector, shape: [2, 3], dtype: u16 }}
{extra}
"#
    );
    let mut doc: serde_json::Value = serde_yaml::from_str(&text).unwrap();
    // Handlers are attached in code; the document needs one to validate.
    doc["lclstreamer"]["data_handlers"] = serde_json::json!(["BinaryFileWritingDataHandler"]);
    doc["data_handlers"] = serde_json::json!({"BinaryFileWritingDataHandler": {"directory": std::env::temp_dir()}});
    let mut cfg = crate::wire::validate_document(&doc).unwrap();
    cfg.handlers.clear();
    cfg
}

fn run_to_memory(cfg: &PipelineConfig) -> (RunSummary, Vec<Vec<u8>>) {
    let mut p = load_pipeline(cfg, WorkerInfo::single()).unwrap();
    let mem = MemoryHandler::default();
    p.add_handler(Box::new(mem.clone()));
    let s = p.run().unwrap();
    let blobs = mem.blobs.lock().clone();
    (s, blobs)
}

fn leading_dims(blobs: &[Vec<u8>]) -> Vec<u64> {
    blobs
        .iter()
        .map(|b| crate::wire::container::batch_size(&decode_container(b).unwrap()).unwrap().unwrap())
        .collect()
}

#[test]
fn ten_events_batch_four() {
    let (s, blobs) = run_to_memory(&config(10, 4, ""));
    assert_eq!(leading_dims(&blobs), [4, 4, 2]);
    assert_eq!((s.events_read, s.batches_emitted, s.blobs_handled), (10, 3, 3));
}

#[test]
fn zero_events() {
    let (s, blobs) = run_to_memory(&config(0, 4, ""));
    assert!(blobs.is_empty());
    assert_eq!((s.events_read, s.batches_emitted), (0, 0));
}

#[test]
fn batches_hold_exactly_the_configured_fields() {
    let (_, blobs) = run_to_memory(&config(7, 3, ""));
    for b in &blobs {
        let batch = decode_container(b).unwrap();
        assert_eq!(batch.keys().collect::<Vec<_>>(), ["/data/det", "/data/id", "/data/timestamp"]);
        assert_eq!(batch["/data/det"].shape[1..], [2, 3]);
    }
}

#[test]
fn same_seed_same_bytes() {
    let a = run_to_memory(&config(50, 8, "")).1;
    let b = run_to_memory(&config(50, 8, "")).1;
    assert_eq!(a, b);
}

#[test]
fn every_handler_gets_identical_blobs() {
    let mut p = load_pipeline(&config(25, 4, ""), WorkerInfo::single()).unwrap();
    let (m1, m2) = (MemoryHandler::default(), MemoryHandler::default());
    p.add_handler(Box::new(m1.clone()));
    p.add_handler(Box::new(m2.clone()));
    let s = p.run().unwrap();
    assert_eq!(s.blobs_handled, 14);
    assert_eq!(*m1.blobs.lock(), *m2.blobs.lock());
}

#[test]
fn file_output_round_trips_every_record_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(10_000, 64, "");
    cfg.handlers = vec![HandlerConfig::BinaryFileWritingDataHandler(crate::wire::config::FileHandlerParams {
        directory: dir.path().to_path_buf(),
        filename_pattern: "batch_{seq:05}.lsc1".into(),
        run_id: "run".into(),
    })];
    let s = load_pipeline(&cfg, WorkerInfo::single()).unwrap().run().unwrap();
    assert_eq!(s.batches_emitted, 157);

    // Oracle: extract the same events directly.
    let specs: Vec<_> = cfg.data_sources.values().cloned().collect();
    let EventSourceConfig::SyntheticEventSource(sp) = &cfg.event_source else { unreachable!() };
    let mut src = SyntheticEventSource::new(sp, WorkerInfo::single());
    let expected: Vec<EventRecord> = std::iter::from_fn(|| src.next_event().unwrap())
        .map(|e| extract(&e, &specs).unwrap())
        .collect();

    let mut files: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    let mut got = Vec::new();
    for f in &files {
        let batch = decode_container(&std::fs::read(f).unwrap()).unwrap();
        for i in 0..batch["/data/id"].leading_dim().unwrap() {
            let mut rec = EventRecord::new();
            for (name, path) in [("det", "/data/det"), ("id", "/data/id"), ("timestamp", "/data/timestamp")] {
                rec.insert(name.to_string(), batch[path].row(i).unwrap());
            }
            got.push(rec);
        }
    }
    assert_eq!(got.len(), 10_000);
    assert!(got == expected);
}

#[test]
fn replay_reproduces_written_events() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(23, 5, "");
    cfg.handlers = vec![HandlerConfig::BinaryFileWritingDataHandler(crate::wire::config::FileHandlerParams {
        directory: dir.path().to_path_buf(),
        filename_pattern: "b_{seq:03}.lsc1".into(),
        run_id: "run".into(),
    })];
    load_pipeline(&cfg, WorkerInfo::single()).unwrap().run().unwrap();
    let original = run_to_memory(&config(23, 5, "")).1;

    let mut replay = cfg.clone();
    replay.handlers.clear();
    replay.event_source = EventSourceConfig::FileReplayEventSource(crate::wire::config::FileReplayParams {
        path: dir.path().to_path_buf(),
    });
    for (name, spec) in replay.data_sources.iter_mut() {
        spec.kind = crate::wire::config::DataSourceKind::FileReplay(crate::wire::config::FileReplaySourceParams {
            field: format!("/data/{name}"),
        });
    }
    let (s, blobs) = run_to_memory(&replay);
    assert_eq!(s.events_read, 23);
    assert_eq!(blobs, original);
}

#[test]
fn replay_workers_partition_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(20, 20, "");
    cfg.handlers = vec![HandlerConfig::BinaryFileWritingDataHandler(crate::wire::config::FileHandlerParams {
        directory: dir.path().to_path_buf(),
        filename_pattern: "b.lsc1".into(),
        run_id: "run".into(),
    })];
    load_pipeline(&cfg, WorkerInfo::single()).unwrap().run().unwrap();
    let mut ids = Vec::new();
    for w in 0..3 {
        let mut src = FileReplayEventSource::new(
            &crate::wire::config::FileReplayParams {
                path: dir.path().join("b.lsc1"),
            },
            WorkerInfo::new(w, 3).unwrap(),
        )
        .unwrap();
        while let Some(e) = src.next_event().unwrap() {
            ids.push(e.raw["/data/id"].to_vec::<u64>().unwrap()[0]);
        }
    }
    ids.sort();
    assert_eq!(ids, (0..20).collect::<Vec<u64>>());
}

#[test]
fn corrupt_replay_file_reports_offset() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("x.lsc1"), b"LSC1\x01garbage").unwrap();
    let mut src = FileReplayEventSource::new(
        &crate::wire::config::FileReplayParams {
            path: dir.path().to_path_buf(),
        },
        WorkerInfo::single(),
    )
    .unwrap();
    let err = src.next_event().unwrap_err().to_string();
    assert!(err.contains("x.lsc1") && err.contains("offset"), "{err}");
}

#[test]
fn unwritable_output_fails_at_load() {
    let file = tempfile::NamedTempFile::new().unwrap();
    let mut cfg = config(5, 1, "");
    cfg.handlers = vec![HandlerConfig::BinaryFileWritingDataHandler(crate::wire::config::FileHandlerParams {
        // a directory below a regular file cannot exist
        directory: file.path().join("sub"),
        filename_pattern: "b.lsc1".into(),
        run_id: "run".into(),
    })];
    assert!(matches!(load_pipeline(&cfg, WorkerInfo::single()), Err(PipelineError::Load(_))));
}

fn flaky(rate: f64) -> PipelineConfig {
    let mut cfg = config(1000, 10, "");
    cfg.data_sources.insert(
        "flaky".into(),
        DataSourceSpec {
            name: "flaky".into(),
            kind: crate::wire::config::DataSourceKind::SyntheticScalar(crate::wire::config::ScalarParams {
                dtype: crate::wire::DType::F32,
                seed: 3,
                failure_rate: rate,
            }),
        },
    );
    cfg
}

#[test]
fn occasional_failures_are_skipped() {
    let (s, blobs) = run_to_memory(&flaky(0.02));
    assert!(s.events_skipped > 0 && s.events_skipped < 60, "{}", s.events_skipped);
    let rows: u64 = leading_dims(&blobs).iter().sum();
    assert_eq!(rows, s.events_read - s.events_skipped);
}

#[test]
fn high_failure_rate_aborts() {
    let mut p = load_pipeline(&flaky(0.5), WorkerInfo::single()).unwrap();
    p.add_handler(Box::new(MemoryHandler::default()));
    let err = p.run().unwrap_err();
    assert!(matches!(err.error, PipelineError::SkipRate { .. }));
    assert_eq!(err.summary.events_read, 100);
}

struct Failing;

impl DataHandler for Failing {
    fn name(&self) -> &'static str {
        "Failing"
    }
    fn handle(&mut self, _: &[u8]) -> Result<(), String> {
        Err("disk full".into())
    }
}

#[test]
fn handler_failure_aborts_with_partial_summary() {
    let mut p = load_pipeline(&config(100, 1, ""), WorkerInfo::single()).unwrap();
    p.add_handler(Box::new(Failing));
    let err = p.run().unwrap_err();
    match &err.error {
        PipelineError::Handler { name, error } => assert_eq!((name.as_str(), error.as_str()), ("Failing", "disk full")),
        other => panic!("{other}"),
    }
    assert!(err.summary.events_read < 100);
}

struct EveryOther(bool);

impl ProcessingStep for EveryOther {
    fn push(&mut self, record: EventRecord, out: &mut Vec<EventRecord>) {
        self.0 = !self.0;
        if self.0 {
            out.push(record);
        }
    }
}

#[test]
fn steps_run_before_batching() {
    let mut p = load_pipeline(&config(10, 2, ""), WorkerInfo::single()).unwrap();
    p.add_step(Box::new(EveryOther(false)));
    let mem = MemoryHandler::default();
    p.add_handler(Box::new(mem.clone()));
    p.run().unwrap();
    assert_eq!(leading_dims(&mem.blobs.lock()), [2, 2, 1]);
}

#[test]
fn stream_handler_delivers_to_relay() {
    let rt = tokio::runtime::Runtime::new().unwrap();
    let relay = rt.block_on(start_relay(RelayConfig::local())).unwrap();
    let mut cfg = config(5, 1, "");
    cfg.handlers = vec![HandlerConfig::BinaryDataStreamingDataHandler(crate::wire::config::StreamHandlerParams {
        endpoint: relay.ingest_addr().to_string(),
        max_attempts: Some(3),
        backoff_base_ms: 100,
        backoff_cap_ms: 10_000,
        on_disconnect: crate::wire::config::DisconnectPolicy::Block,
        tls: None,
    })];
    let s = load_pipeline(&cfg, WorkerInfo::single()).unwrap().run().unwrap();
    assert_eq!(s.blobs_handled, 5);
    let deadline = Instant::now() + std::time::Duration::from_secs(5);
    while relay.stats().frames_in < 5 && Instant::now() < deadline {
        std::thread::sleep(std::time::Duration::from_millis(10));
    }
    assert_eq!(relay.stats().frames_in, 5);
}

#[test]
fn config_documents_load() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "lclstreamer: {{event_source: SyntheticEventSource, processing_pipeline: BatchProcessingPipeline, \
         data_serializer: Lsc1Serializer, data_handlers: [BinaryFileWritingDataHandler]}}\n\
         event_source: {{SyntheticEventSource: {{seed: 2, max_events: 3}}}}\n\
         data_handlers: {{BinaryFileWritingDataHandler: {{directory: {:?}}}}}\n\
         data_sources: {{ts: {{type: SyntheticTimestamp}}}}\n",
        dir.path()
    );
    let cfg = validate_config(&text).unwrap();
    let s = load_pipeline(&cfg, WorkerInfo::single()).unwrap().run().unwrap();
    assert_eq!((s.events_read, s.batches_emitted), (3, 3));
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn batching_partitions_events(events in 0u64..60, batch in 1i64..9) {
        let (s, blobs) = run_to_memory(&config(events, batch, ""));
        let dims = leading_dims(&blobs);
        prop_assert_eq!(dims.iter().sum::<u64>(), events);
        if let Some((last, full)) = dims.split_last() {
            prop_assert!(full.iter().all(|d| *d == batch as u64));
            prop_assert!(*last >= 1 && *last <= batch as u64);
        }
        prop_assert_eq!(s.batches_emitted, events.div_ceil(batch as u64));
    }
}
