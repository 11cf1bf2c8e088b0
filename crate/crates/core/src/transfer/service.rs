use std::collections::{HashMap, HashSet};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::Mutex;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::fsm::{step, Step, TransferEvent, TransferState};
use crate::identity::{verify_body, AccessLog, SIGNATURE_HEADER};
use crate::jobs::{Backends, Callback, JobService, JobState, LocalRunner, Notifier, RunnerConfig};
use crate::net::{http_auth, HttpAuth, HttpServer, ServiceTls};
use crate::relay::{start_relay, Capacity, OverflowPolicy, RelayConfig, RelayHandle};
use crate::wire::config::{HandlerConfig, StreamHandlerParams};
use crate::wire::{validate_document, ConfigError, ConfigErrors, PipelineConfig};

/// Relay settings a client may choose per transfer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelayRequest {
    /// Ingest bind address; ephemeral loopback port when absent.
    #[serde(default)]
    pub ingest: Option<String>,
    /// Egress bind address advertised to consumers.
    #[serde(default)]
    pub egress: Option<String>,
    #[serde(default)]
    pub capacity: Option<Capacity>,
    #[serde(default)]
    pub overflow_policy: Option<OverflowPolicy>,
}

/// Body of `POST /transfers`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferRequest {
    /// Pipeline configuration document.
    pub config: Value,
    #[serde(default = "one")]
    pub worker_count: u32,
    #[serde(default)]
    pub relay: RelayRequest,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelayEndpoints {
    pub ingest: String,
    pub egress: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: TransferState,
    /// Absent for the initial state.
    pub event: Option<TransferEvent>,
    pub t: f64,
}

/// What `GET /transfers/{id}` returns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub id: String,
    pub state: TransferState,
    pub worker_count: u32,
    pub relay: Option<RelayEndpoints>,
    pub jobid: Option<String>,
    pub history: Vec<Transition>,
    pub reason: Option<String>,
    /// Job callbacks accepted for this transfer, in arrival order.
    pub callbacks: Vec<Callback>,
}

/// Where the streaming jobs run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobsSettings {
    pub root: PathBuf,
    pub backends: Backends,
    /// Backend used for streaming jobs.
    pub backend: String,
    #[serde(default)]
    pub runner: RunnerConfig,
    /// Job duration limit in minutes.
    #[serde(default = "default_duration")]
    pub duration: u32,
}

fn default_duration() -> u32 {
    60
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferdConfig {
    /// Address of the transfers API.
    #[serde(default = "default_listen")]
    pub listen: String,
    /// Address receiving job callbacks (plain HTTP, HMAC-authenticated).
    #[serde(default = "default_callback_listen")]
    pub callback_listen: String,
    /// Working files of each transfer.
    pub state_dir: PathBuf,
    pub jobs: JobsSettings,
    /// Command that starts a streamer; the job appends
    /// `-c <config> --worker-count <n>`.
    #[serde(default = "default_streamer")]
    pub streamer_command: String,
    /// Longest wait for a relay to empty before it is stopped.
    #[serde(default = "default_drain")]
    pub drain_timeout_seconds: f64,
    #[serde(default)]
    pub tls: Option<ServiceTls>,
    #[serde(default)]
    pub access_log: Option<PathBuf>,
}

fn default_listen() -> String {
    "127.0.0.1:8500".into()
}

fn default_callback_listen() -> String {
    "127.0.0.1:8501".into()
}

fn default_drain() -> f64 {
    10.0
}

/// This executable when it is the `detstream` binary, otherwise whatever
/// `detstream` is on the path.
pub fn default_streamer() -> String {
    let exe = std::env::current_exe()
        .ok()
        .filter(|p| p.file_stem().is_some_and(|s| s == "detstream"))
        .map(|p| p.display().to_string())
        .unwrap_or_else(|| "detstream".into());
    format!("{} streamer run", crate::jobs::script::shell_quote(&exe))
}

impl TransferdConfig {
    /// Loopback ports and a single local backend under `dir`.
    pub fn local(dir: &std::path::Path) -> Self {
        TransferdConfig {
            listen: "127.0.0.1:0".into(),
            callback_listen: "127.0.0.1:0".into(),
            state_dir: dir.join("transfers"),
            jobs: JobsSettings {
                root: dir.join("jobs"),
                backends: Backends::from([("local".to_string(), crate::jobs::BackendConfig::local())]),
                backend: "local".into(),
                runner: RunnerConfig::default(),
                duration: 60,
            },
            streamer_command: default_streamer(),
            drain_timeout_seconds: 10.0,
            tls: None,
            access_log: None,
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_yaml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TransferError {
    #[error("no such transfer {0}")]
    NotFound(String),
    #[error("no transfer owns job {0}")]
    UnknownJob(String),
    #[error("transfer {0} is already terminal")]
    Terminal(String),
    #[error("invalid request: {0}")]
    Invalid(ConfigErrors),
    #[error("bad callback signature")]
    BadSignature,
}

struct Entry {
    record: TransferRecord,
    secret: String,
    config: PipelineConfig,
    request: TransferRequest,
    seen: HashSet<(u32, JobState)>,
}

struct Inner {
    cfg: TransferdConfig,
    jobs: JobService,
    entries: Mutex<HashMap<String, Entry>>,
    by_job: Mutex<HashMap<String, String>>,
    relays: Mutex<HashMap<String, RelayHandle>>,
    callback_url: Mutex<String>,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default().as_secs_f64()
}

/// The transfer-control service: owns relays and streaming jobs and moves
/// each transfer through its state machine.
#[derive(Clone)]
pub struct TransferService {
    inner: Arc<Inner>,
}

impl TransferService {
    pub fn new(cfg: TransferdConfig) -> Result<Self, String> {
        std::fs::create_dir_all(&cfg.state_dir).map_err(|e| format!("{}: {e}", cfg.state_dir.display()))?;
        if !cfg.jobs.backends.contains_key(&cfg.jobs.backend) {
            return Err(format!("jobs.backend {:?} is not configured", cfg.jobs.backend));
        }
        let store = crate::jobs::JobStore::open(&cfg.jobs.root, cfg.jobs.backends.clone())
            .map_err(|e| e.to_string())?
            .with_notifier(Notifier::new(None, Duration::from_millis(200)));
        let store = Arc::new(store);
        let runner = LocalRunner::start(store.clone(), cfg.jobs.runner);
        Ok(TransferService {
            inner: Arc::new(Inner {
                cfg,
                jobs: JobService::new(store, runner),
                entries: Mutex::new(HashMap::new()),
                by_job: Mutex::new(HashMap::new()),
                relays: Mutex::new(HashMap::new()),
                callback_url: Mutex::new(String::new()),
            }),
        })
    }

    pub fn jobs(&self) -> &JobService {
        &self.inner.jobs
    }

    /// URL given to jobs for their callbacks.
    pub fn set_callback_url(&self, url: String) {
        *self.inner.callback_url.lock() = url;
    }

    pub fn get(&self, id: &str) -> Result<TransferRecord, TransferError> {
        self.inner
            .entries
            .lock()
            .get(id)
            .map(|e| e.record.clone())
            .ok_or_else(|| TransferError::NotFound(id.to_string()))
    }

    pub fn list(&self) -> Vec<TransferRecord> {
        let mut v: Vec<TransferRecord> = self.inner.entries.lock().values().map(|e| e.record.clone()).collect();
        v.sort_by(|a, b| a.history[0].t.total_cmp(&b.history[0].t));
        v
    }

    /// Number of relays currently running.
    pub fn live_relays(&self) -> usize {
        self.inner.relays.lock().len()
    }

    /// Applies one event under the transfer's lock. Returns the outcome and
    /// the state afterwards.
    pub fn apply(&self, id: &str, event: TransferEvent) -> Result<(Step, TransferState), TransferError> {
        let (outcome, state) = {
            let mut entries = self.inner.entries.lock();
            let e = entries.get_mut(id).ok_or_else(|| TransferError::NotFound(id.to_string()))?;
            let outcome = step(e.record.state, event);
            match outcome {
                Step::Moved(next) => {
                    e.record.state = next;
                    e.record.history.push(Transition {
                        state: next,
                        event: Some(event),
                        t: now(),
                    });
                }
                Step::Recorded => {}
                Step::Rejected => tracing::info!("transfer {id}: ignored {event} in {}", e.record.state),
            }
            (outcome, e.record.state)
        };
        if let Step::Moved(s) = outcome {
            self.on_enter(id, s);
        }
        Ok((outcome, state))
    }

    fn fail(&self, id: &str, event: TransferEvent, reason: String) {
        if let Some(e) = self.inner.entries.lock().get_mut(id) {
            e.record.reason.get_or_insert(reason);
        }
        let _ = self.apply(id, event);
    }

    /// Side effects of entering a state.
    fn on_enter(&self, id: &str, state: TransferState) {
        match state {
            TransferState::Draining => {
                let svc = self.clone();
                let id = id.to_string();
                tokio::spawn(async move {
                    svc.drain_relay(&id).await;
                    let _ = svc.apply(&id, TransferEvent::DrainDone);
                    svc.stop_relay(&id).await;
                });
            }
            TransferState::Failed | TransferState::Canceled => {
                let svc = self.clone();
                let id = id.to_string();
                tokio::spawn(async move {
                    svc.drain_relay(&id).await;
                    svc.stop_relay(&id).await;
                });
            }
            _ => {}
        }
    }

    async fn drain_relay(&self, id: &str) {
        let timeout = Duration::from_secs_f64(self.inner.cfg.drain_timeout_seconds);
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            let depth = self.inner.relays.lock().get(id).map(|r| r.stats().queue_depth);
            match depth {
                None | Some(0) => return,
                Some(_) if tokio::time::Instant::now() >= deadline => return,
                Some(_) => tokio::time::sleep(Duration::from_millis(20)).await,
            }
        }
    }

    async fn stop_relay(&self, id: &str) {
        let relay = self.inner.relays.lock().remove(id);
        if let Some(r) = relay {
            r.shutdown().await;
        }
    }

    /// Validates and records a transfer, then provisions it in the
    /// background. Must run inside a tokio runtime.
    pub fn create(&self, req: TransferRequest) -> Result<String, TransferError> {
        let config = validate_document(&req.config).map_err(TransferError::Invalid)?;
        if req.worker_count < 1 {
            return Err(TransferError::Invalid(ConfigErrors(vec![ConfigError {
                path: "/worker_count".into(),
                message: "must be at least 1".into(),
            }])));
        }
        let id = uuid::Uuid::new_v4().simple().to_string();
        let mut secret = [0u8; 32];
        rand::rng().fill_bytes(&mut secret);
        let record = TransferRecord {
            id: id.clone(),
            state: TransferState::Created,
            worker_count: req.worker_count,
            relay: None,
            jobid: None,
            history: vec![Transition {
                state: TransferState::Created,
                event: None,
                t: now(),
            }],
            reason: None,
            callbacks: Vec::new(),
        };
        self.inner.entries.lock().insert(
            id.clone(),
            Entry {
                record,
                secret: hex::encode(secret),
                config,
                request: req,
                seen: HashSet::new(),
            },
        );
        let svc = self.clone();
        let tid = id.clone();
        tokio::spawn(async move { svc.provision(&tid).await });
        Ok(id)
    }

    async fn provision(&self, id: &str) {
        let Some((req, mut config, secret)) = self
            .inner
            .entries
            .lock()
            .get(id)
            .map(|e| (e.request.clone(), e.config.clone(), e.secret.clone()))
        else {
            return;
        };
        let mut rc = RelayConfig::local();
        if let Some(a) = req.relay.ingest {
            rc.ingest_endpoint = a;
        }
        if let Some(a) = req.relay.egress {
            rc.egress_endpoint = a;
        }
        if let Some(c) = req.relay.capacity {
            rc.capacity = c;
        }
        if let Some(p) = req.relay.overflow_policy {
            rc.overflow_policy = p;
        }
        let relay = match start_relay(rc).await {
            Ok(r) => r,
            Err(e) => return self.fail(id, TransferEvent::StartFailed, format!("relay: {e}")),
        };
        let endpoints = RelayEndpoints {
            ingest: relay.ingest_addr().to_string(),
            egress: relay.egress_addr().to_string(),
        };
        // Register before the transition so that a cancel racing with us
        // always finds the relay to stop.
        self.inner.relays.lock().insert(id.to_string(), relay);
        if let Some(e) = self.inner.entries.lock().get_mut(id) {
            e.record.relay = Some(endpoints.clone());
        }
        match self.apply(id, TransferEvent::RelayReady) {
            Ok((Step::Moved(TransferState::Starting), _)) => {}
            // cancelled meanwhile; on_enter for that state already stops the relay
            _ => return self.stop_relay(id).await,
        }

        point_at_relay(&mut config, &endpoints.ingest);
        let dir = self.inner.cfg.state_dir.join(id);
        let cfg_path = dir.join("pipeline.yaml");
        let written = std::fs::create_dir_all(&dir).and_then(|_| {
            let text = serde_yaml::to_string(&config.to_document()).expect("config serialises");
            std::fs::write(&cfg_path, text)
        });
        if let Err(e) = written {
            return self.fail(id, TransferEvent::JobFailed, format!("writing {}: {e}", cfg_path.display()));
        }
        let settings = &self.inner.cfg.jobs;
        let spec = json!({
            "name": format!("transfer-{id}"),
            "script": format!(
                "{} -c {} --worker-count {}",
                self.inner.cfg.streamer_command,
                crate::jobs::script::shell_quote(&cfg_path.display().to_string()),
                req.worker_count
            ),
            "resources": {
                "duration": settings.duration,
                "node_count": 1,
                "processes_per_node": req.worker_count,
                "cpu_cores_per_process": 1
            },
            "backend": settings.backend,
            "callback": self.inner.callback_url.lock().clone(),
            "cb_secret": secret,
        });
        // Hold the job index lock across creation so an immediate callback
        // finds its transfer.
        let jobs = self.inner.jobs.clone();
        let by_job = self.inner.by_job.lock();
        let created = tokio::task::block_in_place(|| jobs.create(&spec));
        match created {
            Ok(jobid) => {
                let mut by_job = by_job;
                by_job.insert(jobid.clone(), id.to_string());
                drop(by_job);
                let cancelled = {
                    let mut entries = self.inner.entries.lock();
                    let e = entries.get_mut(id).expect("entry exists");
                    e.record.jobid = Some(jobid.clone());
                    e.record.state == TransferState::Canceled
                };
                if cancelled {
                    let _ = tokio::task::block_in_place(|| self.inner.jobs.cancel(&jobid));
                }
            }
            Err(e) => {
                drop(by_job);
                self.fail(id, TransferEvent::JobFailed, format!("job submission: {e}"));
            }
        }
    }

    /// Cancels the job, then lets the relay drain and stops it.
    pub fn cancel(&self, id: &str) -> Result<TransferRecord, TransferError> {
        let (outcome, _) = self.apply(id, TransferEvent::UserCancel)?;
        if outcome == Step::Rejected {
            return Err(TransferError::Terminal(id.to_string()));
        }
        let jobid = self.get(id)?.jobid;
        if let Some(j) = jobid {
            if let Err(e) = tokio::task::block_in_place(|| self.inner.jobs.cancel(&j)) {
                tracing::info!("transfer {id}: job {j}: {e}");
            }
        }
        self.get(id)
    }

    /// Applies a signed job callback. Duplicates are accepted and ignored.
    pub fn callback(&self, body: &[u8], signature: &str) -> Result<(Step, TransferState), TransferError> {
        let cb: Callback = serde_json::from_slice(body).map_err(|e| {
            TransferError::Invalid(ConfigErrors(vec![ConfigError {
                path: "/".into(),
                message: e.to_string(),
            }]))
        })?;
        let id = self
            .inner
            .by_job
            .lock()
            .get(&cb.jobid)
            .cloned()
            .ok_or_else(|| TransferError::UnknownJob(cb.jobid.clone()))?;
        {
            let mut entries = self.inner.entries.lock();
            let e = entries.get_mut(&id).ok_or_else(|| TransferError::NotFound(id.clone()))?;
            if !verify_body(e.secret.as_bytes(), body, signature) {
                return Err(TransferError::BadSignature);
            }
            if !e.seen.insert((cb.jobndx, cb.state)) {
                return Ok((Step::Rejected, e.record.state));
            }
            e.record.callbacks.push(cb.clone());
        }
        self.apply(&id, TransferEvent::from_job(cb.state))
    }
}

/// Routes every stream handler at `ingest`, adding one if none exists.
pub fn point_at_relay(config: &mut PipelineConfig, ingest: &str) {
    let mut found = false;
    for h in &mut config.handlers {
        if let HandlerConfig::BinaryDataStreamingDataHandler(p) = h {
            p.endpoint = ingest.to_string();
            found = true;
        }
    }
    if !found {
        config.handlers.push(HandlerConfig::BinaryDataStreamingDataHandler(StreamHandlerParams {
            endpoint: ingest.to_string(),
            max_attempts: Some(10),
            backoff_base_ms: 100,
            backoff_cap_ms: 10_000,
            on_disconnect: Default::default(),
            tls: None,
        }));
    }
}

struct ApiError(TransferError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            TransferError::NotFound(_) | TransferError::UnknownJob(_) => StatusCode::NOT_FOUND,
            TransferError::Terminal(_) => StatusCode::CONFLICT,
            TransferError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            TransferError::BadSignature => StatusCode::UNAUTHORIZED,
        };
        let body = match &self.0 {
            TransferError::Invalid(errs) => json!({"error": "validation failed", "errors": errs.0}),
            e => json!({"error": e.to_string()}),
        };
        (status, Json(body)).into_response()
    }
}

async fn create_transfer(State(svc): State<TransferService>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let req: TransferRequest = serde_json::from_slice(&body).map_err(|e| {
        ApiError(TransferError::Invalid(ConfigErrors(vec![ConfigError {
            path: "/".into(),
            message: e.to_string(),
        }])))
    })?;
    let id = svc.create(req).map_err(ApiError)?;
    Ok(Json(json!({ "id": id })))
}

async fn get_transfer(State(svc): State<TransferService>, Path(id): Path<String>) -> Result<Json<TransferRecord>, ApiError> {
    svc.get(&id).map(Json).map_err(ApiError)
}

async fn list_transfers(State(svc): State<TransferService>) -> Json<Vec<TransferRecord>> {
    Json(svc.list())
}

async fn cancel_transfer(State(svc): State<TransferService>, Path(id): Path<String>) -> Result<Json<TransferRecord>, ApiError> {
    svc.cancel(&id).map(Json).map_err(ApiError)
}

async fn post_callback(State(svc): State<TransferService>, headers: HeaderMap, body: Bytes) -> Result<Json<Value>, ApiError> {
    let sig = headers.get(SIGNATURE_HEADER).and_then(|v| v.to_str().ok()).unwrap_or("");
    let (outcome, state) = svc.callback(&body, sig).map_err(ApiError)?;
    Ok(Json(json!({ "state": state, "applied": matches!(outcome, Step::Moved(_)) })))
}

/// `POST /transfers`, `GET /transfers`, `GET|DELETE /transfers/{id}`.
pub fn transfers_router(svc: TransferService) -> Router {
    Router::new()
        .route("/transfers", post(create_transfer).get(list_transfers))
        .route("/transfers/{id}", get(get_transfer).delete(cancel_transfer))
        .with_state(svc)
}

/// `POST /callbacks`.
pub fn callbacks_router(svc: TransferService) -> Router {
    Router::new().route("/callbacks", post(post_callback)).with_state(svc)
}

/// A running transfer service: the API listener and the callback listener.
pub struct TransferServer {
    pub service: TransferService,
    api: HttpServer,
    callbacks: HttpServer,
    https: bool,
}

impl TransferServer {
    pub fn api_addr(&self) -> SocketAddr {
        self.api.local_addr()
    }

    pub fn callback_addr(&self) -> SocketAddr {
        self.callbacks.local_addr()
    }

    pub fn url(&self) -> String {
        let scheme = if self.https { "https" } else { "http" };
        format!("{scheme}://{}", self.api_addr())
    }

    pub async fn shutdown(self) {
        self.api.shutdown().await;
        self.callbacks.shutdown().await;
        let ids: Vec<String> = self.service.inner.relays.lock().keys().cloned().collect();
        for id in ids {
            self.service.stop_relay(&id).await;
        }
        let runner = self.service.inner.jobs.runner.clone();
        let _ = tokio::task::spawn_blocking(move || runner.shutdown()).await;
    }

    pub async fn wait(self) {
        self.api.wait().await;
    }
}

/// Starts both listeners on the current (multi-threaded) tokio runtime.
pub async fn serve_transfers(cfg: TransferdConfig) -> Result<TransferServer, String> {
    let auth = http_auth(cfg.tls.as_ref()).map_err(|e| e.to_string())?;
    let log = match &cfg.access_log {
        Some(p) => AccessLog::open(p).map_err(|e| format!("{}: {e}", p.display()))?,
        None => AccessLog::null(),
    };
    let (listen, cb_listen) = (cfg.listen.clone(), cfg.callback_listen.clone());
    let https = cfg.tls.is_some();
    let service = TransferService::new(cfg)?;
    let callbacks = HttpServer::bind(&cb_listen, callbacks_router(service.clone()), HttpAuth::None, log.clone())
        .await
        .map_err(|e| format!("bind {cb_listen}: {e}"))?;
    service.set_callback_url(format!("http://{}/callbacks", callbacks.local_addr()));
    let api = HttpServer::bind(&listen, transfers_router(service.clone()), auth, log)
        .await
        .map_err(|e| format!("bind {listen}: {e}"))?;
    Ok(TransferServer {
        service,
        api,
        callbacks,
        https,
    })
}

/// Convenience for tests and examples: a transfer request from a config.
pub fn request(config: &PipelineConfig, worker_count: u32) -> TransferRequest {
    TransferRequest {
        config: config.to_document(),
        worker_count,
        relay: RelayRequest::default(),
    }
}
