//! Command-line front end. The `detstream` binary only calls [`main`].

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Stdio};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use crate::bench::{bench_throughput, run_scaled_tmo, BenchScenario, TmoScenario, WorkerMode};
use crate::identity::signer::SignOptions;
use crate::identity::tls::client_config;
use crate::identity::{new_identity, sign_identity, Identity, SignatureDb, TrustStore};
use crate::jobs::{
    parse_job, serve_jobs, BackendConfig, Backends, JobState, JobStore, JobdConfig, LocalRunner, Notifier,
    RunnerConfig,
};
use crate::net::HttpClient;
use crate::pipeline::{load_pipeline, WorkerInfo};
use crate::relay::{start_relay, OverflowPolicy, RelayConfig};
use crate::transfer::{serve_transfers, TransferdConfig};
use crate::wire::validate_config;

#[derive(Debug, Parser)]
#[command(name = "detstream", version, about = "Detector data streaming toolkit")]
pub struct Cli {
    /// Directory holding this deployment's identity, trust store and
    /// signature database [default: $DETSTREAM_HOME or ~/.detstream]
    #[arg(long, global = true)]
    pub home: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Run or inspect a relay buffer.
    #[command(subcommand)]
    Relay(RelayCmd),
    /// Run pipeline workers.
    #[command(subcommand)]
    Streamer(StreamerCmd),
    /// File-backed job control.
    Psk(PskArgs),
    /// Job service.
    #[command(subcommand)]
    Jobd(ServeCmd),
    /// Transfer-control service.
    #[command(subcommand)]
    Transferd(ServeCmd),
    /// Client of a transfer-control service.
    #[command(subcommand)]
    Transfer(TransferCmd),
    /// Keys, certificates and trusted services.
    #[command(subcommand)]
    Identity(IdentityCmd),
    /// Send one authenticated request to a trusted service.
    Message(MessageArgs),
    /// Loopback benchmarks; the report is JSON on stdout.
    #[command(subcommand)]
    Bench(BenchCmd),
}

#[derive(Debug, Subcommand)]
pub enum RelayCmd {
    Serve {
        #[arg(long, short)]
        config: PathBuf,
    },
    /// Print the counters served by a relay's admin endpoint.
    Stats { endpoint: String },
}

#[derive(Debug, Subcommand)]
pub enum StreamerCmd {
    /// Without `--worker-index`, starts `--worker-count` worker processes
    /// and waits for all of them.
    Run {
        #[arg(long, short)]
        config: PathBuf,
        #[arg(long)]
        worker_index: Option<u32>,
        #[arg(long, default_value_t = 1)]
        worker_count: u32,
    },
}

#[derive(Debug, Args)]
pub struct PskArgs {
    /// Job directory [default: <home>/jobs]
    #[arg(long)]
    pub root: Option<PathBuf>,
    /// YAML map of backend nickname to backend config [default: one `local` backend]
    #[arg(long)]
    pub backends: Option<PathBuf>,
    #[command(subcommand)]
    pub command: PskCmd,
}

#[derive(Debug, Subcommand)]
pub enum PskCmd {
    /// Create a job from a JSON or YAML spec and print its id.
    Create {
        spec: PathBuf,
        /// Run a local job in this process and wait for it.
        #[arg(long)]
        wait: bool,
    },
    /// Record a state of the current run and print the run index.
    Reached { jobid: String, state: JobState, info: i64 },
    Cancel { jobid: String },
    /// Start another run of a finished job and print its index.
    Rerun { jobid: String },
    List,
    /// Print a job's spec and status history.
    Show { jobid: String },
}

#[derive(Debug, Subcommand)]
pub enum ServeCmd {
    Serve {
        #[arg(long, short)]
        config: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum TransferCmd {
    /// Start a transfer running the given pipeline config.
    Create {
        #[arg(long, short)]
        config: PathBuf,
        /// Trusted-service nickname of the transfer service.
        #[arg(long)]
        server: String,
        #[arg(long, default_value_t = 1)]
        workers: u32,
    },
    Status {
        id: Option<String>,
        #[arg(long)]
        server: String,
    },
    Cancel {
        id: String,
        #[arg(long)]
        server: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum IdentityCmd {
    /// Create this deployment's key pair and self-signed certificate.
    Init {
        name: String,
        #[arg(long)]
        force: bool,
    },
    /// Issue a certificate for a public key and print it.
    Sign {
        pubkey: PathBuf,
        name: String,
        #[arg(long, default_value_t = 90)]
        days: u64,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Replace this deployment's certificate with one issued for its key.
    Install {
        cert: PathBuf,
        /// Issuer certificates to present after ours.
        #[arg(long)]
        chain: Option<PathBuf>,
    },
    /// Print this deployment's name and public key.
    Show,
    #[command(subcommand)]
    Trust(TrustCmd),
    /// Mark a certificate serial as revoked.
    Revoke { serial: u64 },
}

#[derive(Debug, Subcommand)]
pub enum TrustCmd {
    Add { nickname: String, url: String, ca: PathBuf },
    Remove { nickname: String },
    List,
}

#[derive(Debug, Args)]
pub struct MessageArgs {
    pub nickname: String,
    pub path: String,
    /// Request body; the method defaults to POST when given.
    #[arg(long)]
    pub json: Option<String>,
    #[arg(long, short = 'X')]
    pub method: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum BenchCmd {
    Throughput {
        #[arg(long, default_value_t = 4)]
        producers: usize,
        #[arg(long, default_value_t = 4)]
        consumers: usize,
        #[arg(long, default_value_t = 1)]
        relays: usize,
        #[arg(long, default_value_t = 1 << 20)]
        size: usize,
        #[arg(long, default_value_t = 4096)]
        count: u64,
        #[arg(long, value_parser = parse_policy, default_value = "block")]
        policy: OverflowPolicy,
        #[arg(long, default_value_t = 64)]
        capacity: usize,
        #[arg(long, default_value_t = 60)]
        limit_seconds: u64,
    },
    TmoScaled {
        #[arg(long, default_value_t = 16)]
        workers: u32,
        #[arg(long, default_value_t = 4)]
        consumers: usize,
        #[arg(long, default_value_t = 1000)]
        events: u64,
        #[arg(long, default_value_t = 100)]
        batch: u64,
        /// Run workers as threads instead of processes.
        #[arg(long)]
        threads: bool,
        /// Disconnect one consumer after it has received this many blobs.
        #[arg(long)]
        kill_consumer_after: Option<u64>,
        /// Where consumers write LSC1 files [default: a temporary directory]
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn parse_policy(s: &str) -> Result<OverflowPolicy, String> {
    serde_json::from_value(Value::String(s.into())).map_err(|_| format!("unknown policy {s:?}"))
}

type CliResult = Result<(), String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn home_dir(explicit: &Option<PathBuf>) -> PathBuf {
    explicit
        .clone()
        .or_else(|| std::env::var_os("DETSTREAM_HOME").map(PathBuf::from))
        .or_else(|| std::env::var_os("HOME").map(|h| PathBuf::from(h).join(".detstream")))
        .unwrap_or_else(|| PathBuf::from(".detstream"))
}

struct Home(PathBuf);

impl Home {
    fn identity(&self) -> PathBuf {
        self.0.join("identity")
    }
    fn trust(&self) -> PathBuf {
        self.0.join("trust.json")
    }
    fn signatures(&self) -> PathBuf {
        self.0.join("signatures.json")
    }
    fn jobs(&self) -> PathBuf {
        self.0.join("jobs")
    }
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("serialisable"));
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Runtime::new().expect("tokio runtime")
}

async fn until_interrupted() {
    let _ = tokio::signal::ctrl_c().await;
}

fn relay(cmd: RelayCmd) -> CliResult {
    match cmd {
        RelayCmd::Serve { config } => {
            let cfg = RelayConfig::load(&config)?;
            runtime().block_on(async {
                let h = start_relay(cfg).await.map_err(err)?;
                eprintln!("ingest {} egress {}", h.ingest_addr(), h.egress_addr());
                if let Some(a) = h.admin_addr() {
                    eprintln!("admin http://{a}/stats");
                }
                until_interrupted().await;
                h.shutdown().await;
                Ok(())
            })
        }
        RelayCmd::Stats { endpoint } => {
            let url = if endpoint.contains("://") {
                format!("{}/stats", endpoint.trim_end_matches('/'))
            } else {
                format!("http://{endpoint}/stats")
            };
            let r = crate::net::block_on(HttpClient::plain().get(&url)).map_err(err)?;
            if !r.is_success() {
                return Err(format!("{url}: {} {}", r.status, r.text()));
            }
            let v: Value = r.json().map_err(err)?;
            print_json(&v);
            Ok(())
        }
    }
}

fn streamer(cmd: StreamerCmd) -> CliResult {
    let StreamerCmd::Run {
        config,
        worker_index,
        worker_count,
    } = cmd;
    let text = std::fs::read_to_string(&config).map_err(|e| format!("{}: {e}", config.display()))?;
    let cfg = validate_config(&text).map_err(err)?;
    if let Some(i) = worker_index {
        let worker = WorkerInfo::new(i, worker_count).map_err(err)?;
        let p = load_pipeline(&cfg, worker).map_err(err)?;
        return match p.run() {
            Ok(s) => {
                print_json(&s);
                Ok(())
            }
            Err(f) => {
                eprintln!("{}", serde_json::to_string(&f.summary).expect("serialisable"));
                Err(f.error.to_string())
            }
        };
    }
    if worker_count <= 1 {
        return streamer(StreamerCmd::Run {
            config,
            worker_index: Some(0),
            worker_count: 1,
        });
    }
    let exe = std::env::current_exe().map_err(err)?;
    let children: Vec<_> = (0..worker_count)
        .map(|i| {
            Command::new(&exe)
                .args(["streamer", "run", "-c"])
                .arg(&config)
                .args(["--worker-index", &i.to_string(), "--worker-count", &worker_count.to_string()])
                .stdin(Stdio::null())
                .spawn()
                .map_err(|e| format!("worker {i}: {e}"))
        })
        .collect::<Result<_, _>>()?;
    let failed: Vec<String> = children
        .into_iter()
        .enumerate()
        .filter_map(|(i, mut c)| match c.wait() {
            Ok(s) if s.success() => None,
            Ok(s) => Some(format!("worker {i}: {s}")),
            Err(e) => Some(format!("worker {i}: {e}")),
        })
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(failed.join("; "))
    }
}

fn load_backends(path: &Option<PathBuf>) -> Result<Backends, String> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            serde_yaml::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))
        }
        None => Ok(Backends::from([("local".to_string(), BackendConfig::local())])),
    }
}

fn psk(home: &Home, args: PskArgs) -> CliResult {
    let root = args.root.unwrap_or_else(|| home.jobs());
    let store = JobStore::open(&root, load_backends(&args.backends)?)
        .map_err(err)?
        .with_notifier(Notifier::new(None, Duration::from_millis(200)));
    let store = Arc::new(store);
    let result = match args.command {
        PskCmd::Create { spec, wait } => {
            let text = std::fs::read_to_string(&spec).map_err(|e| format!("{}: {e}", spec.display()))?;
            let spec = parse_job(&text, store.backends()).map_err(err)?;
            let id = store.create(&spec).map_err(err)?;
            println!("{id}");
            if wait {
                let runner = LocalRunner::start(store.clone(), RunnerConfig::default());
                runner.submit(&id);
                while !store.get(&id).map_err(err)?.state().is_terminal() {
                    std::thread::sleep(Duration::from_millis(50));
                }
                runner.shutdown();
                let rec = store.get(&id).map_err(err)?;
                eprintln!("{} {}", rec.state(), rec.current().info);
            }
            Ok(())
        }
        PskCmd::Reached { jobid, state, info } => store.reached(&jobid, state, info).map(|l| println!("{}", l.jobndx)).map_err(err),
        PskCmd::Cancel { jobid } => store.cancel(&jobid).map(|was| println!("{was}")).map_err(err),
        PskCmd::Rerun { jobid } => store.rerun(&jobid).map(|n| println!("{n}")).map_err(err),
        PskCmd::List => {
            for r in store.list().map_err(err)? {
                println!("{}\t{}\t{}\t{}", r.jobid, r.state(), r.jobndx(), r.spec.name);
            }
            Ok(())
        }
        PskCmd::Show { jobid } => {
            let rec = store.get(&jobid).map_err(err)?;
            print_json(&crate::jobs::JobView::from(&rec));
            Ok(())
        }
    };
    if let Some(n) = store.notifier() {
        if !n.flush(Duration::from_secs(30)) {
            eprintln!("warning: callbacks still pending");
        }
    }
    result
}

fn jobd(cmd: ServeCmd) -> CliResult {
    let ServeCmd::Serve { config } = cmd;
    let cfg = JobdConfig::load(&config)?;
    runtime().block_on(async {
        let server = serve_jobs(&cfg).await?;
        eprintln!("jobs api at {}", server.url());
        until_interrupted().await;
        server.shutdown().await;
        Ok(())
    })
}

fn transferd(cmd: ServeCmd) -> CliResult {
    let ServeCmd::Serve { config } = cmd;
    let cfg = TransferdConfig::load(&config)?;
    runtime().block_on(async {
        let server = serve_transfers(cfg).await?;
        eprintln!("transfers api at {} callbacks at http://{}/callbacks", server.url(), server.callback_addr());
        until_interrupted().await;
        server.shutdown().await;
        Ok(())
    })
}

/// Client for a trusted service: its URL and a TLS config pinning its issuer.
fn trusted_client(home: &Home, nickname: &str) -> Result<(String, HttpClient), String> {
    let store = TrustStore::open(home.trust()).map_err(err)?;
    let entry = store.resolve(nickname).map_err(err)?;
    let url = entry.url.trim_end_matches('/').to_string();
    if url.starts_with("http://") {
        return Ok((url, HttpClient::plain()));
    }
    let id = Identity::load(&home.identity()).map_err(err)?;
    let cfg = client_config(Some(&id), entry.issuer().map_err(err)?).map_err(err)?;
    Ok((url, HttpClient::with_tls(cfg)))
}

fn send(client: &HttpClient, method: &str, url: &str, body: Option<Vec<u8>>) -> Result<Value, String> {
    let method = axum::http::Method::from_bytes(method.to_uppercase().as_bytes()).map_err(err)?;
    let headers: &[(&str, &str)] = if body.is_some() {
        &[("content-type", "application/json")]
    } else {
        &[]
    };
    let r = crate::net::block_on(client.request(method, url, headers, body)).map_err(|e| match e.tls_cause() {
        Some(c) => format!("{url}: {e} ({c})"),
        None => format!("{url}: {e}"),
    })?;
    if !r.is_success() {
        return Err(format!("{url}: {} {}", r.status, r.text()));
    }
    Ok(r.json().unwrap_or_else(|_| Value::String(r.text())))
}

fn transfer(home: &Home, cmd: TransferCmd) -> CliResult {
    match cmd {
        TransferCmd::Create { config, server, workers } => {
            let text = std::fs::read_to_string(&config).map_err(|e| format!("{}: {e}", config.display()))?;
            let doc: Value = serde_yaml::from_str(&text).map_err(|e| format!("{}: {e}", config.display()))?;
            validate_config(&text).map_err(err)?;
            let (base, c) = trusted_client(home, &server)?;
            let body = serde_json::json!({ "config": doc, "worker_count": workers });
            let v = send(&c, "POST", &format!("{base}/transfers"), Some(serde_json::to_vec(&body).map_err(err)?))?;
            println!("{}", v["id"].as_str().unwrap_or_default());
            Ok(())
        }
        TransferCmd::Status { id, server } => {
            let (base, c) = trusted_client(home, &server)?;
            let url = match id {
                Some(id) => format!("{base}/transfers/{id}"),
                None => format!("{base}/transfers"),
            };
            print_json(&send(&c, "GET", &url, None)?);
            Ok(())
        }
        TransferCmd::Cancel { id, server } => {
            let (base, c) = trusted_client(home, &server)?;
            print_json(&send(&c, "DELETE", &format!("{base}/transfers/{id}"), None)?);
            Ok(())
        }
    }
}

fn read_text(p: &Path) -> Result<String, String> {
    std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))
}

fn identity(home: &Home, cmd: IdentityCmd) -> CliResult {
    match cmd {
        IdentityCmd::Init { name, force } => {
            let id = new_identity(&home.identity(), &name, force).map_err(err)?;
            let pubkey = home.identity().join("id.pub");
            std::fs::write(&pubkey, id.public_key_pem()).map_err(err)?;
            eprintln!("identity {name} in {}", home.identity().display());
            println!("{}", pubkey.display());
            Ok(())
        }
        IdentityCmd::Sign { pubkey, name, days, out } => {
            let issuer = Identity::load(&home.identity()).map_err(err)?;
            let opts = SignOptions {
                validity: Duration::from_secs(days * 86_400),
                ..Default::default()
            };
            let db = SignatureDb::open(home.signatures());
            let (pem, rec) = sign_identity(&issuer, &read_text(&pubkey)?, &name, &db, &opts).map_err(err)?;
            eprintln!("serial {}", rec.serial);
            match out {
                Some(p) => std::fs::write(&p, pem).map_err(|e| format!("{}: {e}", p.display())),
                None => {
                    print!("{pem}");
                    Ok(())
                }
            }
        }
        IdentityCmd::Install { cert, chain } => {
            let mut id = Identity::load(&home.identity()).map_err(err)?;
            let chain = match chain {
                Some(p) => crate::identity::parse_certs_pem(read_text(&p)?.as_bytes()).map_err(err)?,
                None => Vec::new(),
            };
            id.install_certificate(&read_text(&cert)?, chain).map_err(err)?;
            id.save(&home.identity(), true).map_err(err)
        }
        IdentityCmd::Show => {
            let id = Identity::load(&home.identity()).map_err(err)?;
            println!("{}", id.name());
            print!("{}", id.public_key_pem());
            Ok(())
        }
        IdentityCmd::Trust(t) => {
            let mut store = TrustStore::open(home.trust()).map_err(err)?;
            match t {
                TrustCmd::Add { nickname, url, ca } => {
                    store.add(&nickname, &url, &read_text(&ca)?).map_err(err)?;
                    store.save().map_err(err)
                }
                TrustCmd::Remove { nickname } => {
                    if !store.remove(&nickname) {
                        return Err(format!("no trusted service {nickname:?}"));
                    }
                    store.save().map_err(err)
                }
                TrustCmd::List => {
                    for e in store.entries() {
                        println!("{}\t{}", e.nickname, e.url);
                    }
                    Ok(())
                }
            }
        }
        IdentityCmd::Revoke { serial } => {
            let rec = SignatureDb::open(home.signatures()).revoke(serial).map_err(err)?;
            eprintln!("revoked {} ({})", rec.serial, rec.subject_name);
            Ok(())
        }
    }
}

fn message(home: &Home, args: MessageArgs) -> CliResult {
    let (base, c) = trusted_client(home, &args.nickname)?;
    let path = if args.path.starts_with('/') {
        args.path
    } else {
        format!("/{}", args.path)
    };
    let method = args
        .method
        .unwrap_or_else(|| if args.json.is_some() { "POST" } else { "GET" }.into());
    let body = match args.json {
        Some(j) => {
            let v: Value = serde_json::from_str(&j).map_err(|e| format!("--json: {e}"))?;
            Some(serde_json::to_vec(&v).map_err(err)?)
        }
        None => None,
    };
    match send(&c, &method, &format!("{base}{path}"), body)? {
        Value::String(s) => print!("{s}"),
        v => print_json(&v),
    }
    Ok(())
}

fn bench(cmd: BenchCmd) -> CliResult {
    match cmd {
        BenchCmd::Throughput {
            producers,
            consumers,
            relays,
            size,
            count,
            policy,
            capacity,
            limit_seconds,
        } => {
            let s = BenchScenario {
                producers,
                consumers,
                relays,
                message_size: size,
                message_count: count,
                policy,
                duration_limit: Duration::from_secs(limit_seconds),
                capacity_frames: capacity,
            };
            print_json(&bench_throughput(&s).map_err(err)?);
            Ok(())
        }
        BenchCmd::TmoScaled {
            workers,
            consumers,
            events,
            batch,
            threads,
            kill_consumer_after,
            output,
        } => {
            let tmp;
            let output = match output {
                Some(p) => p,
                None => {
                    tmp = tempfile::tempdir().map_err(err)?;
                    tmp.path().to_path_buf()
                }
            };
            let mode = if threads {
                WorkerMode::Threads
            } else {
                WorkerMode::Processes(std::env::current_exe().map_err(err)?)
            };
            let s = TmoScenario {
                workers,
                consumers,
                events_per_worker: events,
                batch_size: batch,
                kill_consumer_after,
                ..TmoScenario::standard(output, mode)
            };
            let r = run_scaled_tmo(&s).map_err(err)?;
            print_json(&r);
            if r.exactly_once() || kill_consumer_after.is_some() {
                Ok(())
            } else {
                Err("batches were lost or duplicated".into())
            }
        }
    }
}

pub fn run(cli: Cli) -> CliResult {
    let home = Home(home_dir(&cli.home));
    match cli.command {
        Cmd::Relay(c) => relay(c),
        Cmd::Streamer(c) => streamer(c),
        Cmd::Psk(a) => psk(&home, a),
        Cmd::Jobd(c) => jobd(c),
        Cmd::Transferd(c) => transferd(c),
        Cmd::Transfer(c) => transfer(&home, c),
        Cmd::Identity(c) => identity(&home, c),
        Cmd::Message(a) => message(&home, a),
        Cmd::Bench(c) => bench(c),
    }
}

pub fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("DETSTREAM_LOG").unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
