//! Local jobs with callbacks: create, run, rerun, read logs, and print the
//! batch script the same job would get on a slurm backend.
//!
//! cargo run --example job_runner

use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::http::HeaderMap;
use axum::routing::post;
use axum::Router;
use detstream::identity::{verify_body, AccessLog, SIGNATURE_HEADER};
use detstream::jobs::spec::{EXAMPLE_BACKENDS, EXAMPLE_JOBSPEC};
use detstream::jobs::{
    emit_slurm_script, parse_job, BackendConfig, Backends, JobStore, LocalRunner, Notifier, RunnerConfig,
};
use detstream::net::{HttpAuth, HttpServer};

const SECRET: &str = "example-secret";

fn main() {
    let rt = tokio::runtime::Runtime::new().unwrap();
    let receiver = rt.block_on(async {
        let app = Router::new().route(
            "/cb",
            post(|headers: HeaderMap, body: Bytes| async move {
                let sig = headers.get(SIGNATURE_HEADER).and_then(|v| v.to_str().ok()).unwrap_or("");
                let ok = verify_body(SECRET.as_bytes(), &body, sig);
                println!("callback (signature ok: {ok}): {}", String::from_utf8_lossy(&body));
                if ok { "ok" } else { "bad signature" }
            }),
        );
        HttpServer::bind("127.0.0.1:0", app, HttpAuth::None, AccessLog::null()).await.unwrap()
    });

    let dir = tempfile::tempdir().unwrap();
    let backends = Backends::from([("local".to_string(), BackendConfig::local())]);
    let notifier = Notifier::new(None, Duration::from_millis(100));
    let store = Arc::new(JobStore::open(dir.path(), backends).unwrap().with_notifier(notifier.clone()));
    let runner = LocalRunner::start(store.clone(), RunnerConfig::default());

    let text = format!(
        "name: demo\nscript: echo run $DETSTREAM_JOBNDX; echo oops >&2\nbackend: local\n\
         resources: {{duration: 1, node_count: 1, processes_per_node: 1, cpu_cores_per_process: 1}}\n\
         callback: http://{}/cb\ncb_secret: {SECRET}\n",
        receiver.local_addr()
    );
    let spec = parse_job(&text, store.backends()).unwrap();
    let id = store.create(&spec).unwrap();
    for run in 1..=2 {
        if run > 1 {
            store.rerun(&id).unwrap();
        }
        runner.submit(&id);
        while !store.get(&id).unwrap().state().is_terminal() {
            std::thread::sleep(Duration::from_millis(20));
        }
        print!("log {run}: {}", store.read_log(&id, run, "out", None).unwrap());
    }
    notifier.flush(Duration::from_secs(10));
    for line in store.get(&id).unwrap().history {
        println!("{}", serde_json::to_string(&line).unwrap());
    }
    runner.shutdown();
    rt.block_on(receiver.shutdown());

    let backends: Backends = serde_yaml::from_str(EXAMPLE_BACKENDS).unwrap();
    let spec = parse_job(EXAMPLE_JOBSPEC, &backends).unwrap();
    let script = emit_slurm_script(
        "1700000000.1",
        &spec,
        &backends[&spec.backend],
        std::path::Path::new("/jobs/1700000000.1"),
        "detstream psk --root /jobs",
    );
    println!("\n{script}");
}
