use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::*;
use crate::identity::{sign_body, SIGNATURE_HEADER};
use crate::jobs::{JobState, RunnerConfig};
use crate::net::HttpClient;

fn pipeline_doc() -> Value {
    serde_yaml::from_str(
        r#"
lclstreamer:
  event_source: SyntheticEventSource
  processing_pipeline: BatchProcessingPipeline
  data_serializer: Lsc1Serializer
  data_handlers: [BinaryDataStreamingDataHandler]
event_source:
  SyntheticEventSource: { seed: 1, max_events: 10 }
processing_pipeline:
  BatchProcessingPipeline: { batch_size: 5 }
data_serializer:
  Lsc1Serializer: { compression: none }
data_handlers:
  BinaryDataStreamingDataHandler: { endpoint: "127.0.0.1:1" }
data_sources:
  id: { type: SyntheticEventId }
"#,
    )
    .unwrap()
}

fn config(dir: &std::path::Path, streamer: &str) -> TransferdConfig {
    let mut cfg = TransferdConfig::local(dir);
    cfg.streamer_command = streamer.into();
    cfg.drain_timeout_seconds = 1.0;
    cfg.jobs.runner = RunnerConfig {
        slots: 4,
        minute_seconds: 60.0,
        kill_grace_seconds: 0.5,
    };
    cfg
}

fn body(worker_count: u32) -> Value {
    json!({ "config": pipeline_doc(), "worker_count": worker_count })
}

async fn wait_state(c: &HttpClient, base: &str, id: &str, want: TransferState) -> TransferRecord {
    let deadline = Instant::now() + Duration::from_secs(20);
    loop {
        let rec: TransferRecord = c.get(&format!("{base}/transfers/{id}")).await.unwrap().json().unwrap();
        if rec.state == want {
            return rec;
        }
        assert!(Instant::now() < deadline, "stuck in {} waiting for {want}: {rec:?}", rec.state);
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

async fn wait_no_relays(svc: &TransferService) {
    let deadline = Instant::now() + Duration::from_secs(10);
    while svc.live_relays() > 0 {
        assert!(Instant::now() < deadline, "relay left running");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

fn states(rec: &TransferRecord) -> Vec<TransferState> {
    rec.history.iter().map(|t| t.state).collect()
}

fn refused(addr: &str) -> bool {
    std::net::TcpStream::connect_timeout(&addr.parse().unwrap(), Duration::from_millis(500)).is_err()
}

#[test]
fn successful_job_completes_the_transfer() {
    let rt = tokio::runtime::Runtime::new().unwrap();
    let dir = tempfile::tempdir().unwrap();
    rt.block_on(async {
        let server = serve_transfers(config(dir.path(), "sleep 0.3; true")).await.unwrap();
        let base = server.url();
        let c = HttpClient::plain();
        let r = c.post_json(&format!("{base}/transfers"), &body(2)).await.unwrap();
        assert_eq!(r.status, 200, "{}", r.text());
        let id = r.json::<Value>().unwrap()["id"].as_str().unwrap().to_string();

        let rec = wait_state(&c, &base, &id, TransferState::Completed).await;
        assert_eq!(
            states(&rec),
            [
                TransferState::Created,
                TransferState::Starting,
                TransferState::Running,
                TransferState::Draining,
                TransferState::Completed
            ]
        );
        assert!(rec.history.windows(2).all(|w| w[0].t <= w[1].t));
        let states_seen: Vec<JobState> = rec.callbacks.iter().map(|cb| cb.state).collect();
        assert_eq!(states_seen, [JobState::Active, JobState::Completed]);

        // the job saw a config pointing at this transfer's relay
        let relay = rec.relay.clone().unwrap();
        let written = std::fs::read_to_string(dir.path().join("transfers").join(&id).join("pipeline.yaml")).unwrap();
        let cfg = crate::wire::validate_config(&written).unwrap();
        let crate::wire::config::HandlerConfig::BinaryDataStreamingDataHandler(p) = &cfg.handlers[0] else {
            panic!()
        };
        assert_eq!(p.endpoint, relay.ingest);
        let job = server.service.jobs().store.get(rec.jobid.as_deref().unwrap()).unwrap();
        assert!(job.spec.script.ends_with("--worker-count 2"), "{}", job.spec.script);

        wait_no_relays(&server.service).await;
        assert!(refused(&relay.ingest));
        server.shutdown().await;
    });
}

#[test]
fn cancel_while_running() {
    let rt = tokio::runtime::Runtime::new().unwrap();
    let dir = tempfile::tempdir().unwrap();
    rt.block_on(async {
        let server = serve_transfers(config(dir.path(), "sleep 30; true")).await.unwrap();
        let base = server.url();
        let c = HttpClient::plain();
        let r = c.post_json(&format!("{base}/transfers"), &body(1)).await.unwrap();
        let id = r.json::<Value>().unwrap()["id"].as_str().unwrap().to_string();
        let rec = wait_state(&c, &base, &id, TransferState::Running).await;

        let r = c.delete(&format!("{base}/transfers/{id}")).await.unwrap();
        assert_eq!(r.status, 200, "{}", r.text());
        assert_eq!(r.json::<TransferRecord>().unwrap().state, TransferState::Canceled);
        assert_eq!(c.delete(&format!("{base}/transfers/{id}")).await.unwrap().status, 409);

        let jobid = rec.jobid.unwrap();
        let deadline = Instant::now() + Duration::from_secs(10);
        loop {
            let job = server.service.jobs().store.get(&jobid).unwrap();
            if job.state() == JobState::Canceled {
                break;
            }
            assert!(Instant::now() < deadline, "job still {}", job.state());
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
        wait_no_relays(&server.service).await;
        assert!(refused(&rec.relay.unwrap().ingest));
        // late callbacks do not leave the terminal state
        assert_eq!(server.service.get(&id).unwrap().state, TransferState::Canceled);
        server.shutdown().await;
    });
}

#[test]
fn failing_job_fails_the_transfer() {
    let rt = tokio::runtime::Runtime::new().unwrap();
    let dir = tempfile::tempdir().unwrap();
    rt.block_on(async {
        let server = serve_transfers(config(dir.path(), "exit 3; true")).await.unwrap();
        let base = server.url();
        let c = HttpClient::plain();
        let r = c.post_json(&format!("{base}/transfers"), &body(1)).await.unwrap();
        let id = r.json::<Value>().unwrap()["id"].as_str().unwrap().to_string();
        let rec = wait_state(&c, &base, &id, TransferState::Failed).await;
        assert_eq!(rec.callbacks.last().unwrap().info, 3);
        wait_no_relays(&server.service).await;
        server.shutdown().await;
    });
}

#[test]
fn busy_relay_port_fails_without_a_job() {
    let rt = tokio::runtime::Runtime::new().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    rt.block_on(async {
        let server = serve_transfers(config(dir.path(), "true")).await.unwrap();
        let base = server.url();
        let c = HttpClient::plain();
        let mut b = body(1);
        b["relay"] = json!({ "ingest": taken.local_addr().unwrap().to_string() });
        let r = c.post_json(&format!("{base}/transfers"), &b).await.unwrap();
        let id = r.json::<Value>().unwrap()["id"].as_str().unwrap().to_string();
        let rec = wait_state(&c, &base, &id, TransferState::Failed).await;
        assert_eq!(states(&rec), [TransferState::Created, TransferState::Failed]);
        assert!(rec.reason.unwrap().starts_with("relay:"));
        assert!(rec.jobid.is_none());
        assert!(server.service.jobs().store.list().unwrap().is_empty());
        assert_eq!(server.service.live_relays(), 0);
        server.shutdown().await;
    });
}

#[test]
fn invalid_requests_are_rejected() {
    let rt = tokio::runtime::Runtime::new().unwrap();
    let dir = tempfile::tempdir().unwrap();
    rt.block_on(async {
        let server = serve_transfers(config(dir.path(), "true")).await.unwrap();
        let base = server.url();
        let c = HttpClient::plain();
        let mut doc = pipeline_doc();
        doc["processing_pipeline"]["BatchProcessingPipeline"]["batch_size"] = 0.into();
        let r = c
            .post_json(&format!("{base}/transfers"), &json!({ "config": doc }))
            .await
            .unwrap();
        assert_eq!(r.status, 422);
        assert!(r.json::<Value>().unwrap()["errors"][0]["path"]
            .as_str()
            .unwrap()
            .contains("batch_size"));
        let r = c
            .post_json(&format!("{base}/transfers"), &json!({ "config": pipeline_doc(), "worker_count": 0 }))
            .await
            .unwrap();
        assert_eq!(r.status, 422);
        assert_eq!(c.get(&format!("{base}/transfers/nope")).await.unwrap().status, 404);
        assert_eq!(c.delete(&format!("{base}/transfers/nope")).await.unwrap().status, 404);
        assert_eq!(server.service.live_relays(), 0);
        assert!(server.service.list().is_empty());
        server.shutdown().await;
    });
}

#[test]
fn callback_authentication_and_duplicates() {
    let rt = tokio::runtime::Runtime::new().unwrap();
    let dir = tempfile::tempdir().unwrap();
    rt.block_on(async {
        let server = serve_transfers(config(dir.path(), "sleep 30; true")).await.unwrap();
        let base = server.url();
        let cb_url = format!("http://{}/callbacks", server.callback_addr());
        let c = HttpClient::plain();
        let r = c.post_json(&format!("{base}/transfers"), &body(1)).await.unwrap();
        let id = r.json::<Value>().unwrap()["id"].as_str().unwrap().to_string();
        let rec = wait_state(&c, &base, &id, TransferState::Running).await;
        let jobid = rec.jobid.clone().unwrap();
        let job = server.service.jobs().store.get(&jobid).unwrap();
        let secret = job.spec.cb_secret.clone().unwrap();

        let send = |payload: Value, key: String| {
            let c = c.clone();
            let url = cb_url.clone();
            async move {
                let bytes = serde_json::to_vec(&payload).unwrap();
                let sig = sign_body(key.as_bytes(), &bytes);
                c.request(
                    axum::http::Method::POST,
                    &url,
                    &[(SIGNATURE_HEADER, sig.as_str()), ("content-type", "application/json")],
                    Some(bytes),
                )
                    .await
                    .unwrap()
            }
        };

        let active = json!({"jobid": jobid, "jobndx": 1, "state": "active", "info": 0});
        let r = send(active.clone(), secret.clone()).await;
        assert_eq!(r.status, 200, "{}", r.text());
        assert_eq!(r.json::<Value>().unwrap()["applied"], false);
        assert_eq!(server.service.get(&id).unwrap().callbacks.len(), rec.callbacks.len());

        let r = send(json!({"jobid": "1.1", "jobndx": 1, "state": "active", "info": 0}), secret.clone()).await;
        assert_eq!(r.status, 404);

        let done = json!({"jobid": jobid, "jobndx": 1, "state": "completed", "info": 0});
        let r = send(done.clone(), "wrong".into()).await;
        assert_eq!(r.status, 401);
        assert_eq!(server.service.get(&id).unwrap().state, TransferState::Running);

        let r = send(done.clone(), secret.clone()).await;
        assert_eq!(r.status, 200);
        assert_eq!(r.json::<Value>().unwrap()["state"], "DRAINING");
        wait_state(&c, &base, &id, TransferState::Completed).await;
        let r = send(done, secret.clone()).await;
        assert_eq!(r.status, 200);
        assert_eq!(r.json::<Value>().unwrap()["state"], "COMPLETED");
        server.service.jobs().cancel(&jobid).unwrap();
        wait_no_relays(&server.service).await;
        server.shutdown().await;
    });
}
