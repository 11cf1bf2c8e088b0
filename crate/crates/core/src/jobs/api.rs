use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::runner::LocalRunner;
use super::spec::{validate_job, BackendType};
use super::store::{JobError, JobRecord, JobStore, StatusLine};
use super::JobState;

/// Store plus the runner that executes local jobs.
#[derive(Clone)]
pub struct JobService {
    pub store: Arc<JobStore>,
    pub runner: LocalRunner,
}

impl JobService {
    pub fn new(store: Arc<JobStore>, runner: LocalRunner) -> Self {
        JobService { store, runner }
    }

    /// Creates a job and, for local backends, queues it for execution.
    pub fn create(&self, doc: &Value) -> Result<String, JobError> {
        let spec = validate_job(doc, self.store.backends()).map_err(JobError::Invalid)?;
        let id = self.store.create(&spec)?;
        if self.store.backends()[&spec.backend].kind == BackendType::Local {
            self.runner.submit(&id);
        }
        Ok(id)
    }

    pub fn cancel(&self, jobid: &str) -> Result<JobState, JobError> {
        let was = self.store.cancel(jobid)?;
        if was == JobState::Active {
            self.runner.kill(jobid);
        }
        Ok(was)
    }

    pub fn rerun(&self, jobid: &str) -> Result<u32, JobError> {
        let ndx = self.store.rerun(jobid)?;
        let rec = self.store.get(jobid)?;
        if self.store.backends().get(&rec.spec.backend).map(|b| b.kind) == Some(BackendType::Local) {
            self.runner.submit(jobid);
        }
        Ok(ndx)
    }

    /// Re-queues jobs left queued by an earlier server process.
    pub fn resume(&self) -> Result<usize, JobError> {
        let mut n = 0;
        for rec in self.store.list()? {
            let local = self.store.backends().get(&rec.spec.backend).map(|b| b.kind) == Some(BackendType::Local);
            if local && rec.state() == JobState::Queued {
                self.runner.submit(&rec.jobid);
                n += 1;
            }
        }
        Ok(n)
    }
}

/// Summary row of `GET /jobs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSummary {
    pub jobid: String,
    pub name: String,
    pub backend: String,
    pub state: JobState,
    pub jobndx: u32,
    pub updated: f64,
}

/// Full view of `GET /jobs/{id}`; the callback secret is never returned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobView {
    pub jobid: String,
    pub spec: Value,
    pub history: Vec<StatusLine>,
}

impl From<&JobRecord> for JobView {
    fn from(r: &JobRecord) -> Self {
        let mut spec = serde_json::to_value(&r.spec).expect("spec serialises");
        if let Some(s) = spec.get_mut("cb_secret") {
            *s = Value::String("***".into());
        }
        JobView {
            jobid: r.jobid.clone(),
            spec,
            history: r.history.clone(),
        }
    }
}

struct ApiError(JobError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match &self.0 {
            JobError::NotFound(_) => (StatusCode::NOT_FOUND, json!({"error": self.0.to_string()})),
            JobError::Illegal { .. } | JobError::AlreadyTerminal(_) | JobError::NotTerminal(_) => {
                (StatusCode::CONFLICT, json!({"error": self.0.to_string()}))
            }
            JobError::Invalid(errs) => (
                StatusCode::UNPROCESSABLE_ENTITY,
                json!({"error": "validation failed", "errors": errs.0}),
            ),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, json!({"error": self.0.to_string()})),
        };
        (status, Json(body)).into_response()
    }
}

impl From<JobError> for ApiError {
    fn from(e: JobError) -> Self {
        ApiError(e)
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn invalid(path: &str, message: impl Into<String>) -> ApiError {
    ApiError(JobError::Invalid(crate::wire::ConfigErrors(vec![crate::wire::ConfigError {
        path: path.into(),
        message: message.into(),
    }])))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, JobError> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .expect("job store task panicked")
        .map_err(ApiError)
}

async fn create_job(State(svc): State<JobService>, body: Bytes) -> ApiResult<Json<Value>> {
    let doc: Value = serde_json::from_slice(&body).map_err(|e| invalid("/", e.to_string()))?;
    let id = blocking(move || svc.create(&doc)).await?;
    Ok(Json(json!({ "jobid": id })))
}

async fn list_jobs(State(svc): State<JobService>) -> ApiResult<Json<Vec<JobSummary>>> {
    let recs = blocking(move || svc.store.list()).await?;
    Ok(Json(
        recs.iter()
            .map(|r| JobSummary {
                jobid: r.jobid.clone(),
                name: r.spec.name.clone(),
                backend: r.spec.backend.clone(),
                state: r.state(),
                jobndx: r.jobndx(),
                updated: r.current().t,
            })
            .collect(),
    ))
}

async fn get_job(State(svc): State<JobService>, Path(id): Path<String>) -> ApiResult<Json<JobView>> {
    let rec = blocking(move || svc.store.get(&id)).await?;
    Ok(Json(JobView::from(&rec)))
}

async fn cancel_job(State(svc): State<JobService>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let jobid = id.clone();
    let was = blocking(move || svc.cancel(&id)).await?;
    Ok(Json(json!({ "jobid": jobid, "state": JobState::Canceled, "previous": was })))
}

async fn rerun_job(State(svc): State<JobService>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let jobid = id.clone();
    let ndx = blocking(move || svc.rerun(&id)).await?;
    Ok(Json(json!({ "jobid": jobid, "jobndx": ndx })))
}

#[derive(Debug, Deserialize)]
struct LogQuery {
    stream: Option<String>,
    tail: Option<usize>,
}

async fn get_log(
    State(svc): State<JobService>,
    Path((id, ndx)): Path<(String, u32)>,
    Query(q): Query<LogQuery>,
) -> ApiResult<Response> {
    let stream = q.stream.unwrap_or_else(|| "out".into());
    if stream != "out" && stream != "err" {
        return Err(invalid("/stream", "must be out or err"));
    }
    let text = blocking(move || svc.store.read_log(&id, ndx, &stream, q.tail)).await?;
    Ok(([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], text).into_response())
}

/// Routes:
///
/// - `POST /jobs` create, `GET /jobs` list
/// - `GET /jobs/{id}` spec and history, `DELETE /jobs/{id}` cancel
/// - `POST /jobs/{id}/rerun`
/// - `GET /jobs/{id}/logs/{ndx}?stream=out|err&tail=N`
pub fn router(svc: JobService) -> Router {
    Router::new()
        .route("/jobs", post(create_job).get(list_jobs))
        .route("/jobs/{id}", get(get_job).delete(cancel_job))
        .route("/jobs/{id}/rerun", post(rerun_job))
        .route("/jobs/{id}/logs/{ndx}", get(get_log))
        .with_state(svc)
}
