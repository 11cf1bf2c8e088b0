use std::collections::HashMap;
use std::io::Read;
use std::net::{Shutdown, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::throughput::percentile;
use super::BenchError;
use crate::pipeline::{load_pipeline, WorkerInfo};
use crate::relay::{OverflowPolicy, RelayConfig, RelayThread};
use crate::wire::frame::HEADER_LEN;
use crate::wire::{decode_container, validate_config, PipelineConfig};

pub const ID_PATH: &str = "/tmo/id";
pub const SENT_PATH: &str = "/tmo/sent";

/// How streamer workers are started.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum WorkerMode {
    /// One thread per worker in this process.
    Threads,
    /// One `<exe> streamer run` process per worker.
    Processes(PathBuf),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TmoScenario {
    pub workers: u32,
    pub consumers: usize,
    pub events_per_worker: u64,
    pub batch_size: u64,
    /// Side of the square synthetic detector image, in pixels.
    pub detector_side: u32,
    pub policy: OverflowPolicy,
    pub mode: WorkerMode,
    /// Consumer 0 disconnects after receiving this many blobs.
    pub kill_consumer_after: Option<u64>,
    /// LSC1 files land in `<output>/consumer-<j>/`.
    pub output: PathBuf,
    pub duration_limit: Duration,
}

impl TmoScenario {
    /// 16 workers, 4 consumers, 1000 events per worker in batches of 100.
    pub fn standard(output: impl Into<PathBuf>, mode: WorkerMode) -> Self {
        TmoScenario {
            workers: 16,
            consumers: 4,
            events_per_worker: 1000,
            batch_size: 100,
            detector_side: 32,
            policy: OverflowPolicy::Block,
            mode,
            kill_consumer_after: None,
            output: output.into(),
            duration_limit: Duration::from_secs(120),
        }
    }

    pub fn expected_blobs(&self) -> u64 {
        self.workers as u64 * self.events_per_worker.div_ceil(self.batch_size)
    }

    /// Pipeline configuration each worker runs.
    pub fn pipeline_config(&self, ingest: &str) -> PipelineConfig {
        let side = self.detector_side;
        let text = format!(
            r#"
lclstreamer:
  event_source: SyntheticEventSource
  processing_pipeline: BatchProcessingPipeline
  data_serializer: Lsc1Serializer
  data_handlers: [BinaryDataStreamingDataHandler]
event_source:
  SyntheticEventSource: {{ seed: 42, max_events: {events} }}
processing_pipeline:
  BatchProcessingPipeline: {{ batch_size: {batch} }}
data_serializer:
  Lsc1Serializer:
    compression: none
    fields: {{ id: {ID_PATH}, sent: {SENT_PATH}, det: /tmo/det }}
data_handlers:
  BinaryDataStreamingDataHandler: {{ endpoint: "{ingest}", max_attempts: 5 }}
data_sources:
  id: {{ type: SyntheticEventId }}
  sent: {{ type: SystemTimestamp }}
  det: {{ type: SyntheticAreaDetector, shape: [{side}, {side}], dtype: u16 }}
"#,
            events = self.events_per_worker,
            batch = self.batch_size,
        );
        validate_config(&text).expect("built-in config is valid")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TmoReport {
    pub workers: u32,
    pub consumers: usize,
    pub blobs_expected: u64,
    pub blobs_ingested: u64,
    pub blobs_received: u64,
    pub per_consumer: Vec<u64>,
    /// Batches decoded more than once, counted per extra copy.
    pub duplicates: u64,
    /// Batches never decoded by any consumer.
    pub losses: u64,
    /// Batches a consumer saw out of its worker's order.
    pub order_violations: u64,
    pub undecodable: u64,
    pub files_written: u64,
    /// Relay frames handed to a consumer that died before writing them.
    pub delivery_failures: u64,
    pub dropped: u64,
    /// From the newest event of a batch to its decode at a consumer.
    pub p50_latency_ms: f64,
    pub p99_latency_ms: f64,
    /// From each event's read to the decode of its batch.
    pub p99_event_latency_ms: f64,
    pub wall_seconds: f64,
    pub timed_out: bool,
}

impl TmoReport {
    pub fn exactly_once(&self) -> bool {
        self.duplicates == 0 && self.losses == 0 && self.undecodable == 0
    }
}

fn now_ns() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default().as_nanos() as u64
}

#[derive(Default)]
struct Receipt {
    /// (worker, batch index within the worker)
    batches: Vec<(u32, u64)>,
    batch_latency_ns: Vec<u64>,
    event_latency_ns: Vec<u64>,
    order_violations: u64,
    undecodable: u64,
    files: u64,
}

fn consume(mut s: TcpStream, dir: PathBuf, sc: (u32, u64), kill_after: Option<u64>, received: &AtomicU64) -> Receipt {
    let (workers, batch) = sc;
    let mut r = Receipt::default();
    let mut last: HashMap<u32, u64> = HashMap::new();
    let mut hdr = [0u8; HEADER_LEN];
    let mut buf = Vec::new();
    loop {
        if kill_after.is_some_and(|k| r.batches.len() as u64 + r.undecodable >= k) {
            let _ = s.shutdown(Shutdown::Both);
            break;
        }
        if s.read_exact(&mut hdr).is_err() {
            break;
        }
        buf.resize(u64::from_le_bytes(hdr) as usize, 0);
        if s.read_exact(&mut buf).is_err() {
            break;
        }
        let t = now_ns();
        received.fetch_add(1, Ordering::Relaxed);
        let path = dir.join(format!("{:06}.lsc1", r.files));
        if std::fs::write(&path, &buf).is_ok() {
            r.files += 1;
        }
        let decoded = decode_container(&buf).ok().and_then(|b| {
            let ids = b.get(ID_PATH)?.to_vec::<u64>()?;
            let sent = b.get(SENT_PATH)?.to_vec::<u64>()?;
            (!ids.is_empty() && ids.len() == sent.len()).then_some((ids, sent))
        });
        let Some((ids, sent)) = decoded else {
            r.undecodable += 1;
            continue;
        };
        let worker = (ids[0] % workers as u64) as u32;
        let index = ids[0] / workers as u64 / batch;
        if let Some(prev) = last.insert(worker, index) {
            if index <= prev {
                r.order_violations += 1;
            }
        }
        r.batches.push((worker, index));
        r.batch_latency_ns.push(t.saturating_sub(*sent.iter().max().unwrap()));
        r.event_latency_ns.extend(sent.iter().map(|s| t.saturating_sub(*s)));
    }
    r
}

enum Worker {
    Thread(std::thread::JoinHandle<Result<(), String>>),
    Process(Child),
}

fn spawn_workers(s: &TmoScenario, cfg: &PipelineConfig) -> Result<Vec<Worker>, BenchError> {
    let mut out = Vec::new();
    match &s.mode {
        WorkerMode::Threads => {
            for i in 0..s.workers {
                let p = load_pipeline(cfg, WorkerInfo::new(i, s.workers).expect("index in range"))
                    .map_err(|e| BenchError::Setup(e.to_string()))?;
                out.push(Worker::Thread(std::thread::spawn(move || {
                    p.run().map(|_| ()).map_err(|f| f.error.to_string())
                })));
            }
        }
        WorkerMode::Processes(exe) => {
            let path = s.output.join("pipeline.yaml");
            let text = serde_yaml::to_string(&cfg.to_document()).expect("config serialises");
            std::fs::write(&path, text)?;
            for i in 0..s.workers {
                let child = Command::new(exe)
                    .args(["streamer", "run", "-c"])
                    .arg(&path)
                    .args(["--worker-index", &i.to_string(), "--worker-count", &s.workers.to_string()])
                    .stdin(Stdio::null())
                    .stdout(Stdio::null())
                    .stderr(Stdio::piped())
                    .spawn()
                    .map_err(|e| BenchError::Setup(format!("{}: {e}", exe.display())))?;
                out.push(Worker::Process(child));
            }
        }
    }
    Ok(out)
}

fn join_worker(i: usize, w: Worker) -> Result<(), String> {
    match w {
        Worker::Thread(h) => h.join().map_err(|_| "panicked".to_string())?,
        Worker::Process(c) => {
            let out = c.wait_with_output().map_err(|e| e.to_string())?;
            if out.status.success() {
                Ok(())
            } else {
                Err(format!("{}: {}", out.status, String::from_utf8_lossy(&out.stderr).trim()))
            }
        }
    }
    .map_err(|e| format!("worker {i}: {e}"))
}

fn make_dir(p: &Path) -> Result<(), BenchError> {
    std::fs::create_dir_all(p).map_err(|e| BenchError::Setup(format!("{}: {e}", p.display())))
}

/// Streamer workers with synthetic sources push batches through one relay
/// to consumers that write each blob to disk and decode it.
///
/// Fails when any worker fails. Blob accounting comes from the event ids
/// inside each batch, so it does not trust the relay's counters.
pub fn run_scaled_tmo(s: &TmoScenario) -> Result<TmoReport, BenchError> {
    if s.workers == 0 || s.consumers == 0 || s.events_per_worker == 0 || s.batch_size == 0 {
        return Err(BenchError::Infeasible("all counts must be at least 1".into()));
    }
    make_dir(&s.output)?;
    let mut rc = RelayConfig::local();
    rc.overflow_policy = s.policy;
    let relay = RelayThread::start(rc, 0).map_err(|e| BenchError::Setup(e.to_string()))?;

    let received = Arc::new(AtomicU64::new(0));
    let mut socks = Vec::new();
    let mut consumers = Vec::new();
    for j in 0..s.consumers {
        let dir = s.output.join(format!("consumer-{j}"));
        make_dir(&dir)?;
        let sock = TcpStream::connect(relay.egress_addr())?;
        socks.push(sock.try_clone()?);
        let received = received.clone();
        let kill = if j == 0 { s.kill_consumer_after } else { None };
        let shape = (s.workers, s.batch_size);
        consumers.push(std::thread::spawn(move || consume(sock, dir, shape, kill, &received)));
    }
    let deadline = Instant::now() + Duration::from_secs(5);
    while relay.stats().connected_consumers < s.consumers as u64 {
        if Instant::now() > deadline {
            return Err(BenchError::Setup("consumers did not connect".into()));
        }
        std::thread::sleep(Duration::from_millis(1));
    }

    let start = Instant::now();
    let cfg = s.pipeline_config(&relay.ingest_addr().to_string());
    let workers = spawn_workers(s, &cfg)?;
    let failures: Vec<String> = workers
        .into_iter()
        .enumerate()
        .filter_map(|(i, w)| join_worker(i, w).err())
        .collect();
    if !failures.is_empty() {
        for sock in &socks {
            let _ = sock.shutdown(Shutdown::Both);
        }
        return Err(BenchError::Setup(failures.join("; ")));
    }

    // Settled when the relay holds nothing and receipts stop moving.
    let limit = start + s.duration_limit;
    let mut timed_out = false;
    let mut last = (u64::MAX, Instant::now());
    loop {
        let st = relay.stats();
        let got = received.load(Ordering::Relaxed);
        if st.frames_in == got + st.dropped_count && st.queue_depth == 0 {
            break;
        }
        if got != last.0 {
            last = (got, Instant::now());
        } else if st.queue_depth == 0 && st.in_flight == 0 && last.1.elapsed() > Duration::from_millis(500) {
            break;
        }
        if Instant::now() > limit {
            timed_out = true;
            break;
        }
        std::thread::sleep(Duration::from_millis(2));
    }
    let wall = start.elapsed().as_secs_f64();
    let stats = relay.stats();
    for sock in &socks {
        let _ = sock.shutdown(Shutdown::Both);
    }
    let receipts: Vec<Receipt> = consumers.into_iter().map(|c| c.join().expect("consumer thread")).collect();
    relay.stop();

    let mut seen: HashMap<(u32, u64), u32> = HashMap::new();
    let (mut batch_lat, mut event_lat) = (Vec::new(), Vec::new());
    for r in &receipts {
        for b in &r.batches {
            *seen.entry(*b).or_default() += 1;
        }
        batch_lat.extend_from_slice(&r.batch_latency_ns);
        event_lat.extend_from_slice(&r.event_latency_ns);
    }
    batch_lat.sort_unstable();
    event_lat.sort_unstable();
    let per_worker = s.events_per_worker.div_ceil(s.batch_size);
    let valid = seen.keys().filter(|(w, i)| *w < s.workers && *i < per_worker).count() as u64;
    let expected = s.expected_blobs();
    let per_consumer: Vec<u64> = receipts.iter().map(|r| r.batches.len() as u64).collect();
    Ok(TmoReport {
        workers: s.workers,
        consumers: s.consumers,
        blobs_expected: expected,
        blobs_ingested: stats.frames_in,
        blobs_received: per_consumer.iter().sum(),
        per_consumer,
        duplicates: seen.values().map(|c| (*c as u64).saturating_sub(1)).sum(),
        losses: expected - valid.min(expected),
        order_violations: receipts.iter().map(|r| r.order_violations).sum(),
        undecodable: receipts.iter().map(|r| r.undecodable).sum(),
        files_written: receipts.iter().map(|r| r.files).sum(),
        delivery_failures: stats.delivery_failures,
        dropped: stats.dropped_count,
        p50_latency_ms: percentile(&batch_lat, 50.0) as f64 / 1e6,
        p99_latency_ms: percentile(&batch_lat, 99.0) as f64 / 1e6,
        p99_event_latency_ms: percentile(&event_lat, 99.0) as f64 / 1e6,
        wall_seconds: wall,
        timed_out,
    })
}
