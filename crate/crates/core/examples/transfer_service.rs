//! A transfer service with a local job backend: one transfer runs to
//! completion, another is cancelled while running.
//!
//! Build the binary first so the streaming job can find it:
//!
//! cargo build && cargo run --example transfer_service

use std::path::PathBuf;
use std::time::Duration;

use detstream::net::HttpClient;
use detstream::transfer::{serve_transfers, TransferRecord, TransferState, TransferdConfig};
use serde_json::{json, Value};

const CONFIG: &str = r#"
lclstreamer:
  event_source: SyntheticEventSource
  processing_pipeline: BatchProcessingPipeline
  data_serializer: Lsc1Serializer
  data_handlers: [BinaryDataStreamingDataHandler]
event_source:
  SyntheticEventSource: { seed: 1, max_events: 200, rate: 400 }
processing_pipeline:
  BatchProcessingPipeline: { batch_size: 50 }
data_serializer:
  Lsc1Serializer: { compression: none }
data_handlers:
  BinaryDataStreamingDataHandler: { endpoint: "replaced-by-the-service:0" }
data_sources:
  id: { type: SyntheticEventId }
"#;

/// target/<profile>/detstream next to target/<profile>/examples/<this>.
fn detstream_exe() -> String {
    let exe = std::env::current_exe().unwrap();
    let bin: PathBuf = exe.parent().and_then(|p| p.parent()).unwrap().join("detstream");
    if bin.exists() {
        format!("{} streamer run", bin.display())
    } else {
        "detstream streamer run".into()
    }
}

async fn wait_for(c: &HttpClient, url: &str, want: TransferState) -> TransferRecord {
    loop {
        let rec: TransferRecord = c.get(url).await.unwrap().json().unwrap();
        if rec.state == want || rec.state.is_terminal() {
            return rec;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
}

#[tokio::main(flavor = "multi_thread")]
async fn main() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = TransferdConfig::local(dir.path());
    cfg.streamer_command = detstream_exe();
    let server = serve_transfers(cfg).await.unwrap();
    let base = server.url();
    let c = HttpClient::plain();
    let doc: Value = serde_yaml::from_str(CONFIG).unwrap();

    let r = c.post_json(&format!("{base}/transfers"), &json!({"config": doc, "worker_count": 2})).await.unwrap();
    let id = r.json::<Value>().unwrap()["id"].as_str().unwrap().to_string();
    let rec = wait_for(&c, &format!("{base}/transfers/{id}"), TransferState::Completed).await;
    println!("{}", serde_json::to_string_pretty(&rec).unwrap());

    // slow enough to still be running when cancelled
    let mut slow = doc.clone();
    slow["event_source"]["SyntheticEventSource"]["rate"] = 10.into();
    let r = c.post_json(&format!("{base}/transfers"), &json!({"config": slow})).await.unwrap();
    let id = r.json::<Value>().unwrap()["id"].as_str().unwrap().to_string();
    wait_for(&c, &format!("{base}/transfers/{id}"), TransferState::Running).await;
    let r = c.delete(&format!("{base}/transfers/{id}")).await.unwrap();
    let rec: TransferRecord = r.json().unwrap();
    let states: Vec<_> = rec.history.iter().map(|t| t.state.to_string()).collect();
    println!("cancelled: {}", states.join(" -> "));

    tokio::time::sleep(Duration::from_millis(300)).await;
    println!("relays still running: {}", server.service.live_relays());
    server.shutdown().await;
}
