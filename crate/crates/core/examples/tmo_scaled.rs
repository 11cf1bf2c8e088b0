//! Sixteen streamer workers, one relay, four consumers writing LSC1 files.
//!
//! cargo run --release --example tmo_scaled -- [workers] [events-per-worker]

use detstream::bench::{run_scaled_tmo, TmoScenario, WorkerMode};

fn main() {
    let args: Vec<u64> = std::env::args().skip(1).map(|a| a.parse().expect("number")).collect();
    let dir = tempfile::tempdir().unwrap();
    let s = TmoScenario {
        workers: args.first().copied().unwrap_or(16) as u32,
        events_per_worker: args.get(1).copied().unwrap_or(1000),
        ..TmoScenario::standard(dir.path(), WorkerMode::Threads)
    };
    let r = run_scaled_tmo(&s).expect("run");
    println!("{}", serde_json::to_string_pretty(&r).unwrap());
    println!(
        "{} of {} batches decoded exactly once: {}; p99 latency {:.1} ms",
        r.blobs_received,
        r.blobs_expected,
        r.exactly_once(),
        r.p99_latency_ms
    );
}
