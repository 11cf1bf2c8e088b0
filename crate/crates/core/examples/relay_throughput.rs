//! Relay throughput on loopback.
//!
//! cargo run --release --example relay_throughput -- [producers] [consumers] [relays] [size] [count]

use detstream::bench::{bench_throughput, BenchScenario};

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("number")).collect();
    let get = |i: usize, d: usize| args.get(i).copied().unwrap_or(d);
    let s = BenchScenario {
        producers: get(0, 4),
        consumers: get(1, 4),
        relays: get(2, 1),
        message_size: get(3, 1 << 20),
        message_count: get(4, 4096) as u64,
        ..Default::default()
    };
    let r = bench_throughput(&s).expect("bench");
    println!("{}", serde_json::to_string_pretty(&r).unwrap());
    println!("{:.2} GB/s", r.aggregate_bytes_per_sec / 1e9);
}
