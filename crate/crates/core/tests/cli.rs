//! The `detstream` binary end to end.

use std::path::Path;
use std::process::{Command, Output};

use detstream::jobs::{BackendConfig, BackendType, Backends, JobState, JobStore};
use detstream::wire::decode_container;

const EXE: &str = env!("CARGO_BIN_EXE_detstream");

fn run(home: &Path, args: &[&str]) -> Output {
    let out = Command::new(EXE).arg("--home").arg(home).args(args).output().unwrap();
    if !out.status.success() {
        eprintln!("{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn streamer_launcher_runs_disjoint_workers() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = dir.path().join("cfg.yaml");
    std::fs::write(
        &cfg,
        format!(
            r#"
lclstreamer:
  event_source: SyntheticEventSource
  processing_pipeline: BatchProcessingPipeline
  data_serializer: Lsc1Serializer
  data_handlers: [BinaryFileWritingDataHandler]
event_source:
  SyntheticEventSource: {{ seed: 9, max_events: 30 }}
processing_pipeline:
  BatchProcessingPipeline: {{ batch_size: 10 }}
data_serializer:
  Lsc1Serializer: {{ compression: deflate }}
data_handlers:
  BinaryFileWritingDataHandler: {{ directory: {} }}
data_sources:
  id: {{ type: SyntheticEventId }}
"#,
            out.display()
        ),
    )
    .unwrap();
    let o = run(dir.path(), &["streamer", "run", "-c", cfg.to_str().unwrap(), "--worker-count", "3"]);
    assert!(o.status.success());
    let mut ids = Vec::new();
    let files: Vec<_> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(files.len(), 9);
    for f in files {
        let b = decode_container(&std::fs::read(f).unwrap()).unwrap();
        ids.extend(b["/data/id"].to_vec::<u64>().unwrap());
    }
    ids.sort();
    assert_eq!(ids, (0..90).collect::<Vec<u64>>());

    let bad = dir.path().join("bad.yaml");
    std::fs::write(&bad, "lclstreamer: {}\n").unwrap();
    let o = run(dir.path(), &["streamer", "run", "-c", bad.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("/lclstreamer/event_source"));
}

#[test]
fn emitted_batch_script_reports_through_psk() {
    // Run the slurm-style script directly with sh: the #SBATCH lines are
    // comments, and `reached` calls go to this binary.
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("jobs");
    let bin_dir = dir.path().join("bin");
    std::fs::create_dir_all(&bin_dir).unwrap();
    std::os::unix::fs::symlink(EXE, bin_dir.join("detstream")).unwrap();
    let backends = Backends::from([(
        "batch".to_string(),
        BackendConfig {
            kind: BackendType::SlurmScript,
            queue_name: Some("debug".into()),
            project_name: None,
            prelude: vec![],
        },
    )]);
    let store = JobStore::open(&root, backends.clone()).unwrap();
    let spec_path = dir.path().join("spec.yaml");
    std::fs::write(
        &spec_path,
        "name: batch-demo\nscript: echo from the job; exit 3\nbackend: batch\n\
         resources: {duration: 5, node_count: 1, processes_per_node: 2, cpu_cores_per_process: 1}\n",
    )
    .unwrap();
    let backends_path = dir.path().join("backends.yaml");
    std::fs::write(&backends_path, serde_yaml::to_string(&backends).unwrap()).unwrap();
    let root_s = root.to_str().unwrap();
    let o = run(
        dir.path(),
        &["psk", "--root", root_s, "--backends", backends_path.to_str().unwrap(), "create", spec_path.to_str().unwrap()],
    );
    let id = stdout(&o).trim().to_string();
    assert_eq!(store.get(&id).unwrap().state(), JobState::Queued);

    let script = root.join(&id).join("scripts").join("run");
    let text = std::fs::read_to_string(&script).unwrap();
    assert!(text.contains("#SBATCH --ntasks-per-node=2") || text.contains("#SBATCH"), "{text}");
    let path = format!("{}:{}", bin_dir.display(), std::env::var("PATH").unwrap_or_default());
    let status = Command::new("sh").arg(&script).env("PATH", path).status().unwrap();
    assert_eq!(status.code(), Some(3));

    let rec = store.get(&id).unwrap();
    let states: Vec<(JobState, i64)> = rec.history.iter().map(|l| (l.state, l.info)).collect();
    assert_eq!(states, [(JobState::Queued, 0), (JobState::Active, 0), (JobState::Failed, 3)]);
    assert_eq!(store.read_log(&id, 1, "out", None).unwrap(), "from the job\n");

    let o = run(dir.path(), &["psk", "--root", root_s, "list"]);
    assert!(stdout(&o).contains(&format!("{id}\tfailed\t1\tbatch-demo")));
    let o = run(dir.path(), &["psk", "--root", root_s, "reached", &id, "completed", "0"]);
    assert!(!o.status.success(), "terminal jobs reject further states");
    let o = run(dir.path(), &["psk", "--root", root_s, "rerun", &id]);
    assert_eq!(stdout(&o).trim(), "2");
}

#[test]
fn tmo_scaled_with_worker_processes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["bench", "tmo-scaled", "--output", dir.path().join("o").to_str().unwrap()]);
    assert!(o.status.success());
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["blobs_expected"], 160);
    assert_eq!(r["blobs_received"], 160);
    assert_eq!((r["duplicates"].as_u64(), r["losses"].as_u64()), (Some(0), Some(0)));
}

#[test]
fn identity_trust_and_message() {
    let dir = tempfile::tempdir().unwrap();
    let ca_home = dir.path().join("ca");
    let svc_home = dir.path().join("svc");
    let user_home = dir.path().join("user");
    assert!(run(&ca_home, &["identity", "init", "site-ca"]).status.success());
    let ca_cert = ca_home.join("identity").join("id.crt");
    for (home, name) in [(&svc_home, "jobs-api"), (&user_home, "alice")] {
        let o = run(home, &["identity", "init", name]);
        let pubkey = stdout(&o).trim().to_string();
        let cert = home.join("issued.crt");
        let o = run(&ca_home, &["identity", "sign", &pubkey, name, "--out", cert.to_str().unwrap()]);
        assert!(o.status.success());
        assert!(run(home, &["identity", "install", cert.to_str().unwrap()]).status.success());
    }

    // a job service requiring client certificates from the site CA
    let root = dir.path().join("jobs");
    let log = dir.path().join("access.log");
    let cfg = dir.path().join("jobd.yaml");
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    std::fs::write(
        &cfg,
        format!(
            "root: {}\nlisten: 127.0.0.1:{port}\nbackends: {{local: {{type: local}}}}\naccess_log: {}\n\
             tls: {{identity: {}, client_issuer: {}, signature_db: {}}}\n",
            root.display(),
            log.display(),
            svc_home.join("identity").display(),
            ca_cert.display(),
            ca_home.join("signatures.json").display(),
        ),
    )
    .unwrap();
    let mut server = Command::new(EXE).args(["jobd", "serve", "--config"]).arg(&cfg).spawn().unwrap();
    let url = format!("https://127.0.0.1:{port}");
    assert!(run(&user_home, &["identity", "trust", "add", "jobs", &url, ca_cert.to_str().unwrap()]).status.success());

    let deadline = std::time::Instant::now() + std::time::Duration::from_secs(20);
    let listing = loop {
        let o = run(&user_home, &["message", "jobs", "/jobs"]);
        if o.status.success() {
            break stdout(&o);
        }
        assert!(std::time::Instant::now() < deadline, "service never answered");
        std::thread::sleep(std::time::Duration::from_millis(100));
    };
    assert_eq!(listing.trim(), "[]");
    let spec = r#"{"name":"m","script":"true","backend":"local","resources":{"duration":1,"node_count":1,"processes_per_node":1,"cpu_cores_per_process":1}}"#;
    let o = run(&user_home, &["message", "jobs", "/jobs", "--json", spec]);
    assert!(stdout(&o).contains("jobid"));

    // revoke alice: serial 2 (the service certificate was serial 1)
    assert!(run(&ca_home, &["identity", "revoke", "2"]).status.success());
    let o = run(&user_home, &["message", "jobs", "/jobs"]);
    assert!(!o.status.success());
    server.kill().unwrap();
    server.wait().unwrap();

    let text = std::fs::read_to_string(&log).unwrap();
    let records: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(records.iter().any(|r| r["peer"] == "alice" && r["method"] == "POST" && r["path"] == "/jobs"));
    assert!(records.iter().any(|r| r["error"] == "revoked"));
    // private keys stay in their key files
    for home in [&ca_home, &svc_home, &user_home] {
        let key = std::fs::read_to_string(home.join("identity").join("id.key")).unwrap();
        let body: String = key.lines().filter(|l| !l.starts_with("-----")).collect();
        assert!(!text.contains(&body));
        assert!(!std::fs::read_to_string(ca_home.join("signatures.json")).unwrap().contains(&body));
    }
}
