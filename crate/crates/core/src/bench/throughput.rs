use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::net::{Shutdown, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::relay::{Capacity, OverflowPolicy, RelayConfig, RelayThread};
use crate::wire::frame::{header, HEADER_LEN};

/// Bytes at the start of every payload: producer id, sequence, send time.
pub const TAG_LEN: usize = 4 + 8 + 8;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchScenario {
    pub producers: usize,
    pub consumers: usize,
    /// Independent relays; producers and consumers are spread across them.
    pub relays: usize,
    pub message_size: usize,
    /// Total messages over all producers.
    pub message_count: u64,
    pub policy: OverflowPolicy,
    pub duration_limit: Duration,
    /// Ring capacity of each relay, in frames.
    pub capacity_frames: usize,
}

impl Default for BenchScenario {
    fn default() -> Self {
        BenchScenario {
            producers: 4,
            consumers: 4,
            relays: 1,
            message_size: 1 << 20,
            message_count: 4096,
            policy: OverflowPolicy::Block,
            duration_limit: Duration::from_secs(60),
            capacity_frames: 64,
        }
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("infeasible scenario: {0}")]
    Infeasible(String),
    #[error("setup failed: {0}")]
    Setup(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub producers: usize,
    pub consumers: usize,
    pub relays: usize,
    pub message_size: usize,
    pub messages_sent: u64,
    pub messages_received: u64,
    pub per_consumer: Vec<u64>,
    pub duplicates: u64,
    pub losses: u64,
    /// Frames a relay discarded under drop-oldest.
    pub dropped: u64,
    /// Receipts that arrived out of their producer's send order at some consumer.
    pub order_violations: u64,
    pub bytes_received: u64,
    pub wall_seconds: f64,
    pub aggregate_bytes_per_sec: f64,
    pub p50_latency_ms: f64,
    pub p99_latency_ms: f64,
    pub timed_out: bool,
}

impl BenchReport {
    /// Receipts plus losses account for every message sent.
    pub fn consistent(&self) -> bool {
        self.per_consumer.iter().sum::<u64>() == self.messages_received
            && self.messages_received - self.duplicates + self.losses == self.messages_sent
    }
}

pub(crate) fn percentile(sorted: &[u64], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

struct Receipts {
    ids: Vec<(u32, u64)>,
    latencies_ns: Vec<u64>,
    bytes: u64,
    order_violations: u64,
}

fn write_tag(buf: &mut [u8], producer: u32, seq: u64, ts: u64) {
    buf[..4].copy_from_slice(&producer.to_le_bytes());
    buf[4..12].copy_from_slice(&seq.to_le_bytes());
    buf[12..20].copy_from_slice(&ts.to_le_bytes());
}

fn read_tag(buf: &[u8]) -> (u32, u64, u64) {
    (
        u32::from_le_bytes(buf[..4].try_into().unwrap()),
        u64::from_le_bytes(buf[4..12].try_into().unwrap()),
        u64::from_le_bytes(buf[12..20].try_into().unwrap()),
    )
}

fn produce(addr: std::net::SocketAddr, id: u32, count: u64, size: usize, epoch: Instant) -> io::Result<()> {
    let mut s = TcpStream::connect(addr)?;
    s.set_nodelay(true)?;
    let mut buf = vec![0xA5u8; HEADER_LEN + size];
    buf[..HEADER_LEN].copy_from_slice(&header(size as u64));
    for seq in 0..count {
        let ts = epoch.elapsed().as_nanos() as u64;
        write_tag(&mut buf[HEADER_LEN..], id, seq, ts);
        s.write_all(&buf)?;
    }
    s.flush()?;
    s.shutdown(Shutdown::Write)?;
    Ok(())
}

fn consume(mut s: TcpStream, epoch: Instant, received: &AtomicU64, max: usize) -> Receipts {
    let mut r = Receipts {
        ids: Vec::new(),
        latencies_ns: Vec::new(),
        bytes: 0,
        order_violations: 0,
    };
    let mut last: HashMap<u32, u64> = HashMap::new();
    let mut buf = vec![0u8; max];
    let mut hdr = [0u8; HEADER_LEN];
    loop {
        if s.read_exact(&mut hdr).is_err() {
            break;
        }
        let len = u64::from_le_bytes(hdr) as usize;
        if len > buf.len() {
            buf.resize(len, 0);
        }
        if s.read_exact(&mut buf[..len]).is_err() {
            break;
        }
        let now = epoch.elapsed().as_nanos() as u64;
        if len >= TAG_LEN {
            let (p, seq, ts) = read_tag(&buf);
            if let Some(prev) = last.insert(p, seq) {
                if seq <= prev {
                    r.order_violations += 1;
                }
            }
            r.ids.push((p, seq));
            r.latencies_ns.push(now.saturating_sub(ts));
        }
        r.bytes += len as u64;
        received.fetch_add(1, Ordering::Relaxed);
    }
    r
}

/// Runs one scenario in-process: relays on their own threads, one thread per
/// producer and consumer, all over loopback TCP.
pub fn bench_throughput(s: &BenchScenario) -> Result<BenchReport, BenchError> {
    if s.producers == 0 || s.consumers == 0 || s.relays == 0 || s.message_count == 0 {
        return Err(BenchError::Infeasible("all counts must be at least 1".into()));
    }
    if s.producers < s.relays || s.consumers < s.relays {
        return Err(BenchError::Infeasible("need at least one producer and one consumer per relay".into()));
    }
    if s.message_size < TAG_LEN {
        return Err(BenchError::Infeasible(format!("message_size must be at least {TAG_LEN}")));
    }
    let relays: Vec<RelayThread> = (0..s.relays)
        .map(|_| {
            let mut cfg = RelayConfig::local();
            cfg.capacity = Capacity {
                frames: s.capacity_frames.max(1),
                bytes: Capacity::default().bytes,
            };
            cfg.overflow_policy = s.policy;
            cfg.max_frame = (s.message_size as u64).max(crate::wire::DEFAULT_MAX_FRAME);
            RelayThread::start(cfg, 0).map_err(|e| BenchError::Setup(e.to_string()))
        })
        .collect::<Result<_, _>>()?;

    let epoch = Instant::now();
    let received = Arc::new(AtomicU64::new(0));
    let mut consumer_socks = Vec::new();
    let mut consumers = Vec::new();
    for j in 0..s.consumers {
        let sock = TcpStream::connect(relays[j % s.relays].egress_addr())?;
        consumer_socks.push(sock.try_clone()?);
        let received = received.clone();
        let size = s.message_size;
        consumers.push(std::thread::spawn(move || consume(sock, epoch, &received, size)));
    }
    // Let every consumer register before the first frame arrives.
    let deadline = Instant::now() + Duration::from_secs(5);
    while relays.iter().map(|r| r.stats().connected_consumers).sum::<u64>() < s.consumers as u64 {
        if Instant::now() > deadline {
            return Err(BenchError::Setup("consumers did not connect".into()));
        }
        std::thread::sleep(Duration::from_millis(1));
    }

    let start = Instant::now();
    let mut producers = Vec::new();
    let mut sent = 0u64;
    for i in 0..s.producers {
        let count = s.message_count / s.producers as u64 + u64::from((i as u64) < s.message_count % s.producers as u64);
        sent += count;
        let addr = relays[i % s.relays].ingest_addr();
        let size = s.message_size;
        producers.push(std::thread::spawn(move || produce(addr, i as u32, count, size, epoch)));
    }
    let stop = Arc::new(AtomicBool::new(false));
    let mut timed_out = false;
    for p in producers {
        p.join().expect("producer thread").map_err(|e| BenchError::Setup(format!("producer: {e}")))?;
    }
    // Done when every frame is either received or accounted as dropped.
    let limit = start + s.duration_limit;
    loop {
        let dropped: u64 = relays.iter().map(|r| r.stats().dropped_count).sum();
        let ingested: u64 = relays.iter().map(|r| r.stats().frames_in).sum();
        let got = received.load(Ordering::Relaxed);
        if ingested == sent && got + dropped >= sent {
            break;
        }
        if Instant::now() > limit {
            timed_out = true;
            break;
        }
        std::thread::sleep(Duration::from_micros(200));
    }
    let wall = start.elapsed();
    stop.store(true, Ordering::Relaxed);
    for sock in &consumer_socks {
        let _ = sock.shutdown(Shutdown::Both);
    }
    let receipts: Vec<Receipts> = consumers.into_iter().map(|c| c.join().expect("consumer thread")).collect();
    let dropped: u64 = relays.iter().map(|r| r.stats().dropped_count).sum();
    drop(relays);

    let mut seen: HashMap<(u32, u64), u32> = HashMap::with_capacity(sent as usize);
    let mut lat: Vec<u64> = Vec::new();
    let mut bytes = 0;
    let mut order_violations = 0;
    for r in &receipts {
        for id in &r.ids {
            *seen.entry(*id).or_default() += 1;
        }
        lat.extend_from_slice(&r.latencies_ns);
        bytes += r.bytes;
        order_violations += r.order_violations;
    }
    lat.sort_unstable();
    let per_consumer: Vec<u64> = receipts.iter().map(|r| r.ids.len() as u64).collect();
    let messages_received: u64 = per_consumer.iter().sum();
    let duplicates: u64 = seen.values().map(|c| (*c as u64).saturating_sub(1)).sum();
    let unique = seen.len() as u64;
    let secs = wall.as_secs_f64();
    Ok(BenchReport {
        producers: s.producers,
        consumers: s.consumers,
        relays: s.relays,
        message_size: s.message_size,
        messages_sent: sent,
        messages_received,
        per_consumer,
        duplicates,
        losses: sent - unique.min(sent),
        dropped,
        order_violations,
        bytes_received: bytes,
        wall_seconds: secs,
        aggregate_bytes_per_sec: if secs > 0.0 { bytes as f64 / secs } else { 0.0 },
        p50_latency_ms: percentile(&lat, 50.0) as f64 / 1e6,
        p99_latency_ms: percentile(&lat, 99.0) as f64 / 1e6,
        timed_out,
    })
}
