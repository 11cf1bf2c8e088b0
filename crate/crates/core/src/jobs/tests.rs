use std::collections::HashSet;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::Router;
use parking_lot::Mutex;
use proptest::prelude::*;
use serde_json::{json, Value};

use super::spec::EXAMPLE_JOBSPEC;
use super::*;
use crate::identity::{verify_body, AccessLog, SIGNATURE_HEADER};
use crate::net::{HttpAuth, HttpClient, HttpServer};

fn local_spec(script: &str, duration: u32) -> JobSpec {
    JobSpec {
        name: "t".into(),
        directory: None,
        script: script.into(),
        resources: Resources {
            duration,
            node_count: 1,
            processes_per_node: 1,
            cpu_cores_per_process: 1,
        },
        backend: "local".into(),
        callback: None,
        cb_secret: None,
    }
}

fn store(dir: &std::path::Path) -> Arc<JobStore> {
    Arc::new(JobStore::open(dir, JobdConfig::local(dir).backends).unwrap())
}

fn fast() -> RunnerConfig {
    RunnerConfig {
        slots: 4,
        minute_seconds: 0.5,
        kill_grace_seconds: 0.5,
    }
}

fn wait_terminal(s: &JobStore, id: &str, timeout: Duration) -> JobRecord {
    let deadline = Instant::now() + timeout;
    loop {
        let r = s.get(id).unwrap();
        if r.state().is_terminal() || Instant::now() > deadline {
            return r;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
}

fn states(r: &JobRecord) -> Vec<(JobState, i64)> {
    r.history.iter().map(|l| (l.state, l.info)).collect()
}

#[test]
fn rapid_creates_get_distinct_ids() {
    let dir = tempfile::tempdir().unwrap();
    let s = store(dir.path());
    let ids: Vec<String> = (0..100).map(|_| s.create(&local_spec("true", 1)).unwrap()).collect();
    assert_eq!(ids.iter().collect::<HashSet<_>>().len(), 100);
    for id in &ids {
        let (secs, n) = id.split_once('.').unwrap();
        assert!(secs.parse::<u64>().is_ok() && n.parse::<u64>().unwrap() >= 1, "{id}");
    }
    let first: Vec<&str> = ids.iter().filter(|i| i.ends_with(".1")).map(String::as_str).collect();
    assert!(!first.is_empty());
    assert_eq!(s.list().unwrap().len(), 100);
}

#[test]
fn job_layout_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let s = store(dir.path());
    let id = s.create(&local_spec("echo hi", 1)).unwrap();
    let jd = dir.path().join(&id);
    for p in ["spec.json", "status.jsonl", "log", "work", "scripts/run"] {
        assert!(jd.join(p).exists(), "{p}");
    }
    let line: Value = serde_json::from_str(std::fs::read_to_string(jd.join("status.jsonl")).unwrap().trim()).unwrap();
    let keys: Vec<&String> = line.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["info", "jobndx", "state", "t"]);
    assert_eq!((line["state"].as_str(), line["jobndx"].as_u64()), (Some("queued"), Some(1)));
}

#[test]
fn exit_codes_map_to_states() {
    let dir = tempfile::tempdir().unwrap();
    let s = store(dir.path());
    let runner = LocalRunner::start(s.clone(), fast());
    let ok = s.create(&local_spec("echo out; echo err >&2; exit 0", 1)).unwrap();
    let bad = s.create(&local_spec("exit 3", 1)).unwrap();
    let sig = s.create(&local_spec("kill -9 $$", 1)).unwrap();
    for id in [&ok, &bad, &sig] {
        runner.submit(id);
    }
    use JobState::*;
    let r = wait_terminal(&s, &ok, Duration::from_secs(10));
    assert_eq!(states(&r), [(Queued, 0), (Active, 0), (Completed, 0)]);
    assert_eq!(s.read_log(&ok, 1, "out", None).unwrap(), "out\n");
    assert_eq!(s.read_log(&ok, 1, "err", None).unwrap(), "err\n");
    assert_eq!(states(&wait_terminal(&s, &bad, Duration::from_secs(10))).last(), Some(&(Failed, 3)));
    assert_eq!(states(&wait_terminal(&s, &sig, Duration::from_secs(10))).last(), Some(&(Failed, 137)));
    runner.shutdown();
}

#[test]
fn duration_limit_fails_with_timeout() {
    let dir = tempfile::tempdir().unwrap();
    let s = store(dir.path());
    let runner = LocalRunner::start(s.clone(), fast());
    let id = s.create(&local_spec("sleep 30", 1)).unwrap();
    let t0 = Instant::now();
    runner.submit(&id);
    let r = wait_terminal(&s, &id, Duration::from_secs(10));
    assert_eq!(r.current().state, JobState::Failed);
    assert_eq!(r.current().info, INFO_TIMEOUT);
    assert!(t0.elapsed() < Duration::from_secs(3));
    runner.shutdown();
}

#[test]
fn spawn_failure_is_negative() {
    let dir = tempfile::tempdir().unwrap();
    let s = store(dir.path());
    let runner = LocalRunner::start(s.clone(), fast());
    let mut spec = local_spec("true", 1);
    spec.directory = Some(dir.path().join("missing"));
    let id = s.create(&spec).unwrap();
    runner.submit(&id);
    let r = wait_terminal(&s, &id, Duration::from_secs(10));
    assert_eq!((r.state(), r.current().info), (JobState::Failed, INFO_SPAWN_FAILED));
    runner.shutdown();
}

#[test]
fn cancel_queued_never_runs() {
    let dir = tempfile::tempdir().unwrap();
    let s = store(dir.path());
    let marker = dir.path().join("ran");
    let id = s.create(&local_spec(&format!("touch {}", marker.display()), 1)).unwrap();
    assert_eq!(s.cancel(&id).unwrap(), JobState::Queued);
    let runner = LocalRunner::start(s.clone(), fast());
    runner.submit(&id);
    std::thread::sleep(Duration::from_millis(300));
    runner.shutdown();
    assert!(!marker.exists());
    assert_eq!(states(&s.get(&id).unwrap()), [(JobState::Queued, 0), (JobState::Canceled, 0)]);
    assert!(matches!(s.cancel(&id), Err(JobError::AlreadyTerminal(_))));
}

#[test]
fn cancel_active_stops_the_process() {
    let dir = tempfile::tempdir().unwrap();
    let s = store(dir.path());
    let runner = LocalRunner::start(s.clone(), fast());
    let svc = JobService::new(s.clone(), runner.clone());
    // ignores TERM, so only the KILL after the grace period stops it
    let id = s.create(&local_spec("trap '' TERM; echo started; while true; do sleep 0.05; done", 10)).unwrap();
    runner.submit(&id);
    let deadline = Instant::now() + Duration::from_secs(5);
    while s.read_log(&id, 1, "out", None).unwrap_or_default().is_empty() && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(20));
    }
    assert_eq!(svc.cancel(&id).unwrap(), JobState::Active);
    let t0 = Instant::now();
    while !runner.running().is_empty() {
        assert!(t0.elapsed() < Duration::from_secs(3), "process survived the grace period");
        std::thread::sleep(Duration::from_millis(20));
    }
    let r = s.get(&id).unwrap();
    assert_eq!(states(&r), [(JobState::Queued, 0), (JobState::Active, 0), (JobState::Canceled, 0)]);
    assert!(matches!(svc.cancel(&id), Err(JobError::AlreadyTerminal(_))));
    runner.shutdown();
}

#[test]
fn terminal_states_reject_transitions() {
    let dir = tempfile::tempdir().unwrap();
    let s = store(dir.path());
    let id = s.create(&local_spec("true", 1)).unwrap();
    s.reached(&id, JobState::Active, 0).unwrap();
    s.reached(&id, JobState::Completed, 0).unwrap();
    let before = std::fs::read(dir.path().join(&id).join("status.jsonl")).unwrap();
    assert!(matches!(s.reached(&id, JobState::Active, 0), Err(JobError::Illegal { .. })));
    assert_eq!(std::fs::read(dir.path().join(&id).join("status.jsonl")).unwrap(), before);
    assert!(matches!(s.reached("999.1", JobState::Active, 0), Err(JobError::NotFound(_))));
    assert!(matches!(s.reached("../etc", JobState::Active, 0), Err(JobError::NotFound(_))));
}

#[test]
fn reruns_number_logs_sequentially() {
    let dir = tempfile::tempdir().unwrap();
    let s = store(dir.path());
    let runner = LocalRunner::start(s.clone(), fast());
    let svc = JobService::new(s.clone(), runner.clone());
    let id = svc.create(&serde_json::to_value(local_spec("echo run $DETSTREAM_JOBNDX", 1)).unwrap()).unwrap();
    wait_terminal(&s, &id, Duration::from_secs(10));
    for ndx in 2..=3 {
        assert_eq!(svc.rerun(&id).unwrap(), ndx);
        let deadline = Instant::now() + Duration::from_secs(10);
        while !(s.get(&id).unwrap().jobndx() == ndx && s.get(&id).unwrap().state().is_terminal()) {
            assert!(Instant::now() < deadline);
            std::thread::sleep(Duration::from_millis(20));
        }
    }
    for ndx in 1..=3 {
        assert_eq!(s.read_log(&id, ndx, "out", None).unwrap(), format!("run {ndx}\n"));
    }
    let r = s.get(&id).unwrap();
    assert!(history_is_legal(&r.history));
    assert_eq!(r.history.iter().filter(|l| l.state.is_terminal()).count(), 3);
    runner.shutdown();
}

#[test]
fn torn_final_line_is_ignored() {
    let dir = tempfile::tempdir().unwrap();
    let s = store(dir.path());
    let id = s.create(&local_spec("true", 1)).unwrap();
    s.reached(&id, JobState::Active, 0).unwrap();
    let path = dir.path().join(&id).join("status.jsonl");
    let mut f = std::fs::OpenOptions::new().append(true).open(&path).unwrap();
    std::io::Write::write_all(&mut f, br#"{"t":1.0,"state":"compl"#).unwrap();
    let r = s.get(&id).unwrap();
    assert_eq!(r.state(), JobState::Active);
}

#[derive(Clone, Default)]
struct Received(Arc<Mutex<Vec<(Value, bool)>>>);

async fn receiver(received: Received, fail_first: usize) -> HttpServer {
    let count = Arc::new(Mutex::new(0usize));
    let app = Router::new().route(
        "/cb",
        post(move |headers: HeaderMap, body: Bytes| {
            let received = received.clone();
            let count = count.clone();
            async move {
                let mut n = count.lock();
                *n += 1;
                if *n <= fail_first {
                    return StatusCode::SERVICE_UNAVAILABLE;
                }
                let sig = headers.get(SIGNATURE_HEADER).and_then(|v| v.to_str().ok()).unwrap_or("");
                let ok = verify_body(b"s3cret", &body, sig);
                received.0.lock().push((serde_json::from_slice(&body).unwrap(), ok));
                StatusCode::OK
            }
        }),
    );
    HttpServer::bind("127.0.0.1:0", app, HttpAuth::None, AccessLog::null()).await.unwrap()
}

#[test]
fn callbacks_are_signed_and_retried() {
    let rt = tokio::runtime::Runtime::new().unwrap();
    let received = Received::default();
    let server = rt.block_on(receiver(received.clone(), 2));
    let dir = tempfile::tempdir().unwrap();
    let n = Notifier::new(None, Duration::from_millis(10));
    let s = Arc::new(
        JobStore::open(dir.path(), JobdConfig::local(dir.path()).backends)
            .unwrap()
            .with_notifier(n.clone()),
    );
    let mut spec = local_spec("exit 0", 1);
    spec.callback = Some(format!("http://{}/cb", server.local_addr()));
    spec.cb_secret = Some("s3cret".into());
    let runner = LocalRunner::start(s.clone(), fast());
    let id = s.create(&spec).unwrap();
    runner.submit(&id);
    wait_terminal(&s, &id, Duration::from_secs(10));
    assert!(n.flush(Duration::from_secs(10)));
    let got = received.0.lock().clone();
    // the first delivery needed three attempts
    assert_eq!(got.len(), 2);
    assert!(got.iter().all(|(_, ok)| *ok));
    assert_eq!(got[1].0, json!({"jobid": id, "jobndx": 1, "state": "completed", "info": 0}));
    assert_eq!(got[0].0["state"], "active");
    assert_eq!(n.stats.delivered.load(std::sync::atomic::Ordering::Relaxed), 2);
    runner.shutdown();
}

#[test]
fn unreachable_callback_never_blocks_the_job() {
    let dir = tempfile::tempdir().unwrap();
    let n = Notifier::new(None, Duration::from_millis(10));
    let s = Arc::new(
        JobStore::open(dir.path(), JobdConfig::local(dir.path()).backends)
            .unwrap()
            .with_notifier(n.clone()),
    );
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut spec = local_spec("true", 1);
    spec.callback = Some(format!("http://127.0.0.1:{port}/cb"));
    spec.cb_secret = Some("x".into());
    let id = s.create(&spec).unwrap();
    let t0 = Instant::now();
    s.reached(&id, JobState::Active, 0).unwrap();
    assert!(t0.elapsed() < Duration::from_millis(200));
    assert!(n.flush(Duration::from_secs(10)));
    assert_eq!(n.stats.failed.load(std::sync::atomic::Ordering::Relaxed), 1);
}

#[derive(Debug, Clone)]
enum Op {
    Create,
    Start(usize),
    Finish(usize, bool),
    Cancel(usize),
    Rerun(usize),
    Reached(usize, usize),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        Just(Op::Create),
        (0..4usize).prop_map(Op::Start),
        (0..4usize, any::<bool>()).prop_map(|(j, ok)| Op::Finish(j, ok)),
        (0..4usize).prop_map(Op::Cancel),
        (0..4usize).prop_map(Op::Rerun),
        (0..4usize, 0..5usize).prop_map(|(j, s)| Op::Reached(j, s)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn random_interleavings_keep_histories_legal(ops in proptest::collection::vec(op(), 1..40)) {
        let dir = tempfile::tempdir().unwrap();
        let s = store(dir.path());
        let mut ids: Vec<String> = Vec::new();
        for o in ops {
            let pick = |j: usize| ids.get(j % ids.len().max(1)).cloned();
            let _ = match o {
                Op::Create => s.create(&local_spec("true", 1)).map(|id| ids.push(id)),
                Op::Start(j) => pick(j).map_or(Ok(()), |id| s.reached(&id, JobState::Active, 0).map(drop)),
                Op::Finish(j, ok) => pick(j).map_or(Ok(()), |id| {
                    let st = if ok { JobState::Completed } else { JobState::Failed };
                    s.reached(&id, st, if ok { 0 } else { 1 }).map(drop)
                }),
                Op::Cancel(j) => pick(j).map_or(Ok(()), |id| s.cancel(&id).map(drop)),
                Op::Rerun(j) => pick(j).map_or(Ok(()), |id| s.rerun(&id).map(drop)),
                Op::Reached(j, k) => pick(j).map_or(Ok(()), |id| s.reached(&id, JobState::ALL[k], 0).map(drop)),
            };
        }
        for id in &ids {
            let r = s.get(id).unwrap();
            prop_assert!(history_is_legal(&r.history), "{:?}", r.history);
        }
    }
}

fn example_spec_local() -> Value {
    let mut doc: Value = serde_yaml::from_str(EXAMPLE_JOBSPEC).unwrap();
    doc["backend"] = "local".into();
    doc["script"] = "echo one; echo two; echo three; sleep 30".into();
    doc.as_object_mut().unwrap().remove("directory");
    doc.as_object_mut().unwrap().remove("callback");
    doc
}

#[test]
fn rest_api() {
    let rt = tokio::runtime::Runtime::new().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = JobdConfig::local(dir.path());
    cfg.runner = fast();
    cfg.runner.minute_seconds = 60.0;
    rt.block_on(async {
        let server = serve_jobs(&cfg).await.unwrap();
        let base = server.url();
        let c = HttpClient::plain();

        let r = c.post_json(&format!("{base}/jobs"), &example_spec_local()).await.unwrap();
        assert_eq!(r.status, 200, "{}", r.text());
        let id = r.json::<Value>().unwrap()["jobid"].as_str().unwrap().to_string();

        let mut bad = example_spec_local();
        bad["resources"]["node_count"] = 0.into();
        let r = c.post_json(&format!("{base}/jobs"), &bad).await.unwrap();
        assert_eq!(r.status, 422);
        assert_eq!(r.json::<Value>().unwrap()["errors"][0]["path"], "/resources/node_count");

        assert_eq!(c.get(&format!("{base}/jobs/123.4")).await.unwrap().status, 404);

        // wait for output, then tail it
        let deadline = Instant::now() + Duration::from_secs(10);
        loop {
            let r = c.get(&format!("{base}/jobs/{id}/logs/1?stream=out&tail=2")).await.unwrap();
            if r.status == 200 && r.text() == "two\nthree\n" {
                break;
            }
            assert!(Instant::now() < deadline, "{} {}", r.status, r.text());
            tokio::time::sleep(Duration::from_millis(50)).await;
        }

        let list: Vec<JobSummary> = c.get(&format!("{base}/jobs")).await.unwrap().json().unwrap();
        assert_eq!(list.len(), 1);
        assert_eq!(list[0].state, JobState::Active);

        let view: JobView = c.get(&format!("{base}/jobs/{id}")).await.unwrap().json().unwrap();
        assert_eq!(view.spec["cb_secret"], "***");

        assert_eq!(c.delete(&format!("{base}/jobs/{id}")).await.unwrap().status, 200);
        assert_eq!(c.delete(&format!("{base}/jobs/{id}")).await.unwrap().status, 409);
        assert_eq!(c.get(&format!("{base}/jobs/{id}/logs/1?stream=bogus")).await.unwrap().status, 422);
        server.shutdown().await;
    });
}
