//! File-backed batch jobs: documents, state machine, store, local runner,
//! callbacks, batch-script emission and the REST service.

pub mod api;
pub mod callback;
pub mod runner;
pub mod script;
pub mod spec;
pub mod state;
pub mod store;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use api::{router, JobService, JobSummary, JobView};
pub use callback::{deliver, Notifier, CALLBACK_ATTEMPTS};
pub use runner::{LocalRunner, RunnerConfig, INFO_LOG_FAILED, INFO_SPAWN_FAILED, INFO_TIMEOUT};
pub use script::{emit_slurm_script, local_script};
pub use spec::{parse_job, validate_job, BackendConfig, BackendType, Backends, Callback, JobSpec, Resources};
pub use state::{JobEvent, JobState};
pub use store::{history_is_legal, JobError, JobRecord, JobStore, StatusLine};

use crate::identity::AccessLog;
use crate::net::{http_auth, ClientTls, HttpServer, ServiceTls};

/// Configuration of the job service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobdConfig {
    /// Top-level job directory.
    pub root: PathBuf,
    #[serde(default = "default_listen")]
    pub listen: String,
    pub backends: Backends,
    #[serde(default)]
    pub runner: RunnerConfig,
    /// HTTPS with client certificates; plain HTTP when absent.
    #[serde(default)]
    pub tls: Option<ServiceTls>,
    /// Client identity for `https` callback URLs.
    #[serde(default)]
    pub callback_tls: Option<ClientTls>,
    #[serde(default)]
    pub access_log: Option<PathBuf>,
}

fn default_listen() -> String {
    "127.0.0.1:8400".into()
}

impl JobdConfig {
    /// A plain-HTTP service on an ephemeral port with one local backend.
    pub fn local(root: impl Into<PathBuf>) -> Self {
        JobdConfig {
            root: root.into(),
            listen: "127.0.0.1:0".into(),
            backends: Backends::from([("local".to_string(), BackendConfig::local())]),
            runner: RunnerConfig::default(),
            tls: None,
            callback_tls: None,
            access_log: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_yaml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Opens the store with callbacks enabled.
    pub fn open_store(&self) -> Result<Arc<JobStore>, String> {
        let tls = match &self.callback_tls {
            Some(t) => Some(t.client_config().map_err(|e| e.to_string())?),
            None => None,
        };
        let notifier = Notifier::new(tls, Duration::from_millis(200));
        let store = JobStore::open(&self.root, self.backends.clone()).map_err(|e| e.to_string())?;
        Ok(Arc::new(store.with_notifier(notifier)))
    }
}

/// A running job service.
pub struct JobServer {
    pub service: JobService,
    http: HttpServer,
    https: bool,
}

impl JobServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.http.local_addr()
    }

    pub fn url(&self) -> String {
        let scheme = if self.https { "https" } else { "http" };
        format!("{scheme}://{}", self.local_addr())
    }

    pub async fn shutdown(self) {
        self.http.shutdown().await;
        let runner = self.service.runner.clone();
        let _ = tokio::task::spawn_blocking(move || runner.shutdown()).await;
    }

    pub async fn wait(self) {
        self.http.wait().await;
    }
}

/// Starts the job service on the current tokio runtime. Jobs left queued
/// by a previous process are picked up again.
pub async fn serve_jobs(cfg: &JobdConfig) -> Result<JobServer, String> {
    let store = cfg.open_store()?;
    let runner = LocalRunner::start(store.clone(), cfg.runner);
    let service = JobService::new(store, runner);
    service.resume().map_err(|e| e.to_string())?;
    let auth = http_auth(cfg.tls.as_ref()).map_err(|e| e.to_string())?;
    let log = match &cfg.access_log {
        Some(p) => AccessLog::open(p).map_err(|e| format!("{}: {e}", p.display()))?,
        None => AccessLog::null(),
    };
    let http = HttpServer::bind(&cfg.listen, router(service.clone()), auth, log)
        .await
        .map_err(|e| format!("bind {}: {e}", cfg.listen))?;
    Ok(JobServer {
        service,
        http,
        https: cfg.tls.is_some(),
    })
}

#[cfg(test)]
mod tests;
