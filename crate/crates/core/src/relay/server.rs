use std::collections::VecDeque;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::routing::get;
use axum::{Json, Router};
use bytes::Bytes;
use parking_lot::Mutex;
use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt, BufReader, BufWriter};
use tokio::sync::Notify;
use tokio::task::JoinHandle;
use tokio_util::sync::CancellationToken;

use super::config::{RelayConfig, Window};
use super::{Enqueued, RelayQueue, RelayStats, RoundRobin};
use crate::identity::tls::{client_config, server_config};
use crate::identity::{load_cert_file, AccessLog, Identity, SignatureDb};
use crate::net::{connect, Acceptor, HttpAuth, HttpServer, NetStream};
use crate::wire::frame::{header, read_frame};

#[derive(Debug, Error)]
pub enum RelayError {
    #[error("invalid relay config: {0}")]
    Config(String),
    #[error("cannot bind {endpoint}: {source}")]
    Bind {
        endpoint: String,
        source: std::io::Error,
    },
    #[error("TLS setup failed: {0}")]
    Tls(String),
}

struct Slot {
    id: u64,
    window: VecDeque<Bytes>,
    bytes: u64,
    wake: Arc<Notify>,
}

impl Slot {
    fn writable(&self, len: u64, w: &Window) -> bool {
        self.window.len() < w.frames && (self.window.is_empty() || self.bytes + len <= w.bytes)
    }
}

struct Core {
    queue: RelayQueue,
    consumers: Vec<Slot>,
    rr: RoundRobin,
    frames_in: u64,
    frames_out: u64,
    bytes_in: u64,
    bytes_out: u64,
    delivery_failures: u64,
    producers: u64,
    next_id: u64,
}

impl Core {
    /// Hands queued frames to writable consumers in round-robin order.
    /// Returns true when ring space was freed.
    fn pump(&mut self, w: &Window) -> bool {
        let mut moved = false;
        while let Some(front) = self.queue.front() {
            let len = front.len() as u64;
            let consumers = &self.consumers;
            let Some(i) = self.rr.next_consumer(consumers.len(), |i| consumers[i].writable(len, w)) else {
                break;
            };
            let frame = self.queue.pop().expect("front exists");
            let slot = &mut self.consumers[i];
            slot.bytes += len;
            slot.window.push_back(frame);
            slot.wake.notify_one();
            self.frames_out += 1;
            self.bytes_out += len;
            moved = true;
        }
        moved
    }

    fn slot(&mut self, id: u64) -> Option<&mut Slot> {
        self.consumers.iter_mut().find(|s| s.id == id)
    }

    fn stats(&self) -> RelayStats {
        RelayStats {
            frames_in: self.frames_in,
            frames_out: self.frames_out,
            bytes_in: self.bytes_in,
            bytes_out: self.bytes_out,
            dropped_count: self.queue.dropped(),
            delivery_failures: self.delivery_failures,
            connected_producers: self.producers,
            connected_consumers: self.consumers.len() as u64,
            queue_depth: self.queue.len() as u64,
            queue_bytes: self.queue.bytes(),
            in_flight: self.consumers.iter().map(|s| s.window.len() as u64).sum(),
        }
    }
}

struct Shared {
    core: Mutex<Core>,
    space: Notify,
    window: Window,
    max_frame: u64,
}

impl Shared {
    fn pump(&self, core: &mut Core) {
        if core.pump(&self.window) {
            self.space.notify_waiters();
        }
    }

    /// Stores one frame, waiting for space under the block policy.
    /// Returns false if cancelled while waiting.
    async fn ingest(&self, mut frame: Bytes, token: &CancellationToken) -> bool {
        loop {
            let notified = self.space.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            {
                let mut core = self.core.lock();
                let len = frame.len() as u64;
                match core.queue.enqueue(frame) {
                    Enqueued::Stored | Enqueued::StoredWithDrop(_) => {
                        core.frames_in += 1;
                        core.bytes_in += len;
                        self.pump(&mut core);
                        return true;
                    }
                    Enqueued::WouldBlock(f) => frame = f,
                }
            }
            tokio::select! {
                _ = &mut notified => {}
                _ = token.cancelled() => return false,
            }
        }
    }
}

/// Cheap clonable view of a relay's counters.
#[derive(Clone)]
pub struct StatsProbe(Arc<Shared>);

impl StatsProbe {
    pub fn stats(&self) -> RelayStats {
        self.0.core.lock().stats()
    }
}

pub struct RelayHandle {
    shared: Arc<Shared>,
    token: CancellationToken,
    ingest: SocketAddr,
    egress: SocketAddr,
    admin: Option<HttpServer>,
    tasks: Vec<JoinHandle<()>>,
}

impl RelayHandle {
    pub fn ingest_addr(&self) -> SocketAddr {
        self.ingest
    }

    pub fn egress_addr(&self) -> SocketAddr {
        self.egress
    }

    pub fn admin_addr(&self) -> Option<SocketAddr> {
        self.admin.as_ref().map(|a| a.local_addr())
    }

    pub fn stats(&self) -> RelayStats {
        self.shared.core.lock().stats()
    }

    pub fn probe(&self) -> StatsProbe {
        StatsProbe(self.shared.clone())
    }

    /// Waits until the ring and every outbound window are empty.
    pub async fn wait_drained(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            let s = self.stats();
            if s.queue_depth == 0 && s.in_flight == 0 {
                return true;
            }
            if Instant::now() >= deadline {
                return false;
            }
            tokio::time::sleep(Duration::from_millis(5)).await;
        }
    }

    /// Stops accepting, closes every connection and waits for the tasks.
    pub async fn shutdown(mut self) {
        self.token.cancel();
        if let Some(a) = self.admin.take() {
            a.shutdown().await;
        }
        for t in self.tasks.drain(..) {
            let _ = t.await;
        }
    }
}

impl Drop for RelayHandle {
    fn drop(&mut self) {
        self.token.cancel();
    }
}

async fn bind(endpoint: &str, tls: Option<Arc<rustls::ServerConfig>>) -> Result<Acceptor, RelayError> {
    Acceptor::bind(endpoint, tls).await.map_err(|source| RelayError::Bind {
        endpoint: endpoint.to_string(),
        source,
    })
}

/// Starts a relay on the current tokio runtime.
pub async fn start_relay(cfg: RelayConfig) -> Result<RelayHandle, RelayError> {
    cfg.validate().map_err(RelayError::Config)?;
    let (server_tls, client_tls) = match &cfg.tls {
        None => (None, None),
        Some(t) => {
            let err = |e: crate::identity::IdentityError| RelayError::Tls(e.to_string());
            let id = Identity::load(&t.identity).map_err(err)?;
            let issuer = load_cert_file(&t.peer_issuer).map_err(err)?;
            let db = t.signature_db.as_ref().map(SignatureDb::open);
            let up_issuer = match &t.upstream_issuer {
                Some(p) => load_cert_file(p).map_err(err)?,
                None => issuer.clone(),
            };
            (
                Some(server_config(&id, Some(issuer), db).map_err(err)?),
                Some(client_config(Some(&id), up_issuer).map_err(err)?),
            )
        }
    };
    let ingest = bind(&cfg.ingest_endpoint, server_tls.clone()).await?;
    let egress = bind(&cfg.egress_endpoint, server_tls).await?;
    let shared = Arc::new(Shared {
        core: Mutex::new(Core {
            queue: RelayQueue::new(cfg.capacity.frames, cfg.capacity.bytes, cfg.overflow_policy),
            consumers: Vec::new(),
            rr: RoundRobin::new(),
            frames_in: 0,
            frames_out: 0,
            bytes_in: 0,
            bytes_out: 0,
            delivery_failures: 0,
            producers: 0,
            next_id: 0,
        }),
        space: Notify::new(),
        window: cfg.consumer_window,
        max_frame: cfg.max_frame,
    });
    let token = CancellationToken::new();
    let ingest_addr = ingest.local_addr().expect("bound");
    let egress_addr = egress.local_addr().expect("bound");

    let admin = match &cfg.admin_endpoint {
        None => None,
        Some(ep) => {
            let probe = StatsProbe(shared.clone());
            let router = Router::new().route("/stats", get(move || async move { Json(probe.stats()) }));
            Some(
                HttpServer::bind(ep, router, HttpAuth::None, AccessLog::null())
                    .await
                    .map_err(|source| RelayError::Bind {
                        endpoint: ep.clone(),
                        source,
                    })?,
            )
        }
    };

    let mut tasks = vec![
        tokio::spawn(accept_loop(ingest, shared.clone(), token.clone(), Role::Producer)),
        tokio::spawn(accept_loop(egress, shared.clone(), token.clone(), Role::Consumer)),
    ];
    if let Some(up) = cfg.upstream.clone() {
        tasks.push(tokio::spawn(upstream_loop(up, client_tls, shared.clone(), token.clone())));
    }
    tracing::info!(%ingest_addr, %egress_addr, "relay started");
    Ok(RelayHandle {
        shared,
        token,
        ingest: ingest_addr,
        egress: egress_addr,
        admin,
        tasks,
    })
}

#[derive(Clone, Copy)]
enum Role {
    Producer,
    Consumer,
}

async fn accept_loop(acc: Acceptor, shared: Arc<Shared>, token: CancellationToken, role: Role) {
    let mut conns = tokio::task::JoinSet::new();
    loop {
        let hs = tokio::select! {
            _ = token.cancelled() => break,
            r = acc.accept() => match r {
                Ok(hs) => hs,
                Err(e) => {
                    tracing::warn!("accept failed: {e}");
                    tokio::time::sleep(Duration::from_millis(10)).await;
                    continue;
                }
            },
            Some(_) = conns.join_next(), if !conns.is_empty() => continue,
        };
        let shared = shared.clone();
        let token = token.clone();
        conns.spawn(async move {
            let peer = hs.peer;
            let stream = tokio::select! {
                _ = token.cancelled() => return,
                r = tokio::time::timeout(Duration::from_secs(10), hs.finish()) => match r {
                    Ok(Ok(s)) => s,
                    Ok(Err(e)) => {
                        tracing::warn!(%peer, "handshake refused: {e}");
                        return;
                    }
                    Err(_) => return,
                },
            };
            match role {
                Role::Producer => producer(stream, &shared, &token).await,
                Role::Consumer => consumer(stream, &shared, &token).await,
            }
        });
    }
    // Dropping the set aborts any connection still running.
    drop(conns);
}

async fn producer(stream: NetStream, shared: &Shared, token: &CancellationToken) {
    shared.core.lock().producers += 1;
    let mut rd = BufReader::with_capacity(256 << 10, stream);
    loop {
        let frame = tokio::select! {
            _ = token.cancelled() => break,
            r = read_frame(&mut rd, shared.max_frame) => match r {
                Ok(Some(f)) => f,
                Ok(None) => break,
                Err(e) => {
                    tracing::debug!("producer stream ended: {e}");
                    break;
                }
            },
        };
        if !shared.ingest(frame, token).await {
            break;
        }
    }
    shared.core.lock().producers -= 1;
}

async fn consumer(stream: NetStream, shared: &Shared, token: &CancellationToken) {
    let wake = Arc::new(Notify::new());
    let id = {
        let mut core = shared.core.lock();
        let id = core.next_id;
        core.next_id += 1;
        core.consumers.push(Slot {
            id,
            window: VecDeque::new(),
            bytes: 0,
            wake: wake.clone(),
        });
        shared.pump(&mut core);
        id
    };
    let (mut rd, wr) = tokio::io::split(stream);
    let mut wr = BufWriter::with_capacity(128 << 10, wr);
    let mut probe = [0u8; 64];
    loop {
        let next = shared.core.lock().slot(id).and_then(|s| s.window.front().cloned());
        match next {
            Some(frame) => {
                let ok = tokio::select! {
                    _ = token.cancelled() => false,
                    r = async {
                        wr.write_all(&header(frame.len() as u64)).await?;
                        wr.write_all(&frame).await
                    } => r.is_ok(),
                };
                if !ok {
                    break;
                }
                let empty = {
                    let mut core = shared.core.lock();
                    let slot = core.slot(id).expect("own slot");
                    slot.window.pop_front();
                    slot.bytes -= frame.len() as u64;
                    let empty = slot.window.is_empty();
                    shared.pump(&mut core);
                    empty
                };
                if empty && wr.flush().await.is_err() {
                    break;
                }
            }
            None => {
                tokio::select! {
                    _ = wake.notified() => {}
                    _ = token.cancelled() => break,
                    // Consumers never send; any read result means the peer is gone.
                    _ = rd.read(&mut probe) => break,
                }
            }
        }
    }
    let mut core = shared.core.lock();
    if let Some(pos) = core.consumers.iter().position(|s| s.id == id) {
        let slot = core.consumers.remove(pos);
        core.delivery_failures += slot.window.len() as u64;
    }
    shared.pump(&mut core);
}

async fn upstream_loop(
    addr: String,
    tls: Option<Arc<rustls::ClientConfig>>,
    shared: Arc<Shared>,
    token: CancellationToken,
) {
    let mut backoff = Duration::from_millis(50);
    loop {
        let conn = tokio::select! {
            _ = token.cancelled() => return,
            r = connect(&addr, tls.clone()) => r,
        };
        match conn {
            Ok(s) => {
                backoff = Duration::from_millis(50);
                producer(s, &shared, &token).await;
            }
            Err(e) => tracing::debug!("upstream {addr} unavailable: {e}"),
        }
        tokio::select! {
            _ = token.cancelled() => return,
            _ = tokio::time::sleep(backoff) => {}
        }
        backoff = (backoff * 2).min(Duration::from_secs(2));
    }
}

/// A relay running on its own OS thread and runtime.
pub struct RelayThread {
    ingest: SocketAddr,
    egress: SocketAddr,
    probe: StatsProbe,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl RelayThread {
    /// `workers == 0` runs a single-threaded runtime.
    pub fn start(cfg: RelayConfig, workers: usize) -> Result<Self, RelayError> {
        let (tx, rx) = std::sync::mpsc::channel();
        let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::Builder::new()
            .name("relay".into())
            .spawn(move || {
                let rt = if workers == 0 {
                    tokio::runtime::Builder::new_current_thread().enable_all().build()
                } else {
                    tokio::runtime::Builder::new_multi_thread()
                        .worker_threads(workers)
                        .enable_all()
                        .build()
                }
                .expect("tokio runtime");
                rt.block_on(async move {
                    match start_relay(cfg).await {
                        Ok(h) => {
                            let _ = tx.send(Ok((h.ingest_addr(), h.egress_addr(), h.probe())));
                            let _ = stop_rx.await;
                            h.shutdown().await;
                        }
                        Err(e) => {
                            let _ = tx.send(Err(e));
                        }
                    }
                });
            })
            .expect("spawn relay thread");
        let (ingest, egress, probe) = rx.recv().expect("relay thread reports")?;
        Ok(RelayThread {
            ingest,
            egress,
            probe,
            stop: Some(stop_tx),
            thread: Some(thread),
        })
    }

    pub fn ingest_addr(&self) -> SocketAddr {
        self.ingest
    }

    pub fn egress_addr(&self) -> SocketAddr {
        self.egress
    }

    pub fn stats(&self) -> RelayStats {
        self.probe.stats()
    }

    pub fn probe(&self) -> StatsProbe {
        self.probe.clone()
    }

    pub fn stop(mut self) {
        self.stop_inner();
    }

    fn stop_inner(&mut self) {
        if let Some(s) = self.stop.take() {
            let _ = s.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for RelayThread {
    fn drop(&mut self) {
        self.stop_inner();
    }
}
