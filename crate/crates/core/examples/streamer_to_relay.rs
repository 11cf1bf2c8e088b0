//! Two pipeline workers stream synthetic batches through a relay to two
//! consumers that write LSC1 files.
//!
//! cargo run --example streamer_to_relay

use std::io::Read;
use std::net::TcpStream;

use detstream::pipeline::{load_pipeline, WorkerInfo};
use detstream::relay::{RelayConfig, RelayThread};
use detstream::wire::{decode_container, validate_config};

const CONFIG: &str = r#"
lclstreamer:
  event_source: SyntheticEventSource
  processing_pipeline: BatchProcessingPipeline
  data_serializer: Lsc1Serializer
  data_handlers: [BinaryDataStreamingDataHandler]
event_source:
  SyntheticEventSource: { seed: 7, max_events: 250 }
processing_pipeline:
  BatchProcessingPipeline: { batch_size: 50 }
data_serializer:
  Lsc1Serializer: { compression: deflate, compression_level: 1 }
data_handlers:
  BinaryDataStreamingDataHandler: { endpoint: "INGEST" }
data_sources:
  id: { type: SyntheticEventId }
  det: { type: SyntheticAreaDetector, shape: [16, 16], dtype: u16 }
"#;

fn main() {
    let relay = RelayThread::start(RelayConfig::local(), 0).unwrap();
    let out = tempfile::tempdir().unwrap();
    let consumers: Vec<_> = (0..2)
        .map(|j| {
            let mut s = TcpStream::connect(relay.egress_addr()).unwrap();
            let dir = out.path().to_path_buf();
            std::thread::spawn(move || {
                let mut n = 0;
                let mut hdr = [0u8; 8];
                while s.read_exact(&mut hdr).is_ok() {
                    let mut blob = vec![0u8; u64::from_le_bytes(hdr) as usize];
                    s.read_exact(&mut blob).unwrap();
                    let batch = decode_container(&blob).unwrap();
                    let ids = batch["/data/id"].to_vec::<u64>().unwrap();
                    println!("consumer {j}: ids {}..={}", ids[0], ids[ids.len() - 1]);
                    std::fs::write(dir.join(format!("c{j}-{n}.lsc1")), &blob).unwrap();
                    n += 1;
                }
                n
            })
        })
        .collect();
    while relay.stats().connected_consumers < 2 {
        std::thread::sleep(std::time::Duration::from_millis(1));
    }

    let cfg = validate_config(&CONFIG.replace("INGEST", &relay.ingest_addr().to_string())).unwrap();
    let workers: Vec<_> = (0..2)
        .map(|i| {
            let p = load_pipeline(&cfg, WorkerInfo::new(i, 2).unwrap()).unwrap();
            std::thread::spawn(move || p.run().unwrap())
        })
        .collect();
    for w in workers {
        let s = w.join().unwrap();
        println!("worker: {} events, {} batches, {} bytes", s.events_read, s.batches_emitted, s.bytes_serialized);
    }
    while relay.stats().queue_depth > 0 || relay.stats().in_flight > 0 {
        std::thread::sleep(std::time::Duration::from_millis(5));
    }
    std::thread::sleep(std::time::Duration::from_millis(50));
    let stats = relay.stats();
    relay.stop();
    let files: usize = consumers.into_iter().map(|c| c.join().unwrap()).sum();
    println!("relay: {} in, {} out; {files} files written", stats.frames_in, stats.frames_out);
}
