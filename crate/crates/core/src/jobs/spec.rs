use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use super::JobState;
use crate::wire::{ConfigError, ConfigErrors};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Resources {
    /// Wall-clock limit in minutes.
    pub duration: u32,
    pub node_count: u32,
    pub processes_per_node: u32,
    pub cpu_cores_per_process: u32,
}

/// The one document describing a job.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub directory: Option<PathBuf>,
    pub script: String,
    pub resources: Resources,
    pub backend: String,
    /// URL that receives a POST on every state change.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub callback: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cb_secret: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendType {
    /// Runs jobs on this machine.
    Local,
    /// Writes a batch script but never submits it.
    #[serde(alias = "slurm")]
    SlurmScript,
}

/// Server-side description of one backend. Never accepted from clients.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    #[serde(rename = "type")]
    pub kind: BackendType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queue_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub project_name: Option<String>,
    /// Shell lines placed before the user script (module loads and the like).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prelude: Vec<String>,
}

impl BackendConfig {
    pub fn local() -> Self {
        BackendConfig {
            kind: BackendType::Local,
            queue_name: None,
            project_name: None,
            prelude: Vec::new(),
        }
    }
}

pub type Backends = BTreeMap<String, BackendConfig>;

/// State-change notification posted to a job's callback URL.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Callback {
    #[serde(deserialize_with = "id_text")]
    pub jobid: String,
    pub jobndx: u32,
    pub state: JobState,
    pub info: i64,
}

/// Job ids look numeric, so YAML writers often leave them unquoted.
fn id_text<'de, D: Deserializer<'de>>(d: D) -> Result<String, D::Error> {
    match Value::deserialize(d)? {
        Value::String(s) => Ok(s),
        Value::Number(n) => Ok(n.to_string()),
        other => Err(serde::de::Error::custom(format!("jobid must be a string, got {other}"))),
    }
}

fn err(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        path: path.into(),
        message: message.into(),
    }
}

/// Parses and checks a job document. Type errors stop at the first problem;
/// value errors are all reported together.
pub fn validate_job(doc: &Value, backends: &Backends) -> Result<JobSpec, ConfigErrors> {
    let spec: JobSpec = serde_path_to_error::deserialize(doc).map_err(|e| {
        let path = e.path().to_string().replace('.', "/");
        ConfigErrors(vec![err(&format!("/{}", path.trim_start_matches('/')), e.inner().to_string())])
    })?;
    let mut errors = Vec::new();
    if spec.name.trim().is_empty() {
        errors.push(err("/name", "must not be empty"));
    }
    if spec.script.trim().is_empty() {
        errors.push(err("/script", "must not be empty"));
    }
    let r = &spec.resources;
    for (field, v) in [
        ("duration", r.duration),
        ("node_count", r.node_count),
        ("processes_per_node", r.processes_per_node),
        ("cpu_cores_per_process", r.cpu_cores_per_process),
    ] {
        if v < 1 {
            errors.push(err(&format!("/resources/{field}"), "must be at least 1"));
        }
    }
    if !backends.contains_key(&spec.backend) {
        let known: Vec<&str> = backends.keys().map(String::as_str).collect();
        errors.push(err(
            "/backend",
            format!("unknown backend {:?}; configured: {}", spec.backend, known.join(", ")),
        ));
    }
    if let Some(url) = &spec.callback {
        if !(url.starts_with("http://") || url.starts_with("https://")) {
            errors.push(err("/callback", "must be an http or https URL"));
        }
        if spec.cb_secret.as_deref().is_none_or(str::is_empty) {
            errors.push(err("/cb_secret", "required when callback is set"));
        }
    }
    if errors.is_empty() {
        Ok(spec)
    } else {
        Err(ConfigErrors(errors))
    }
}

/// YAML or JSON text version of [`validate_job`].
pub fn parse_job(text: &str, backends: &Backends) -> Result<JobSpec, ConfigErrors> {
    let doc: Value = serde_yaml::from_str(text).map_err(|e| ConfigErrors(vec![err("/", e.to_string())]))?;
    validate_job(&doc, backends)
}

/// A streaming job for a slurm cluster, as a client would submit it.
pub const EXAMPLE_JOBSPEC: &str = r#"name: "lclstreamer"
directory: "/psik/76312231.123/work"
script:
  "mpirun -n120 lclstreamer -c cfg.yaml"
resources:
  duration: 60
  node_count: 1
  processes_per_node: 120
  cpu_cores_per_process: 1
backend: S3DFslurm
callback:
  "https://sdfdtn...edu/callbacks"
cb_secret: "***"
"#;

/// Server-side backend table matching [`EXAMPLE_JOBSPEC`].
pub const EXAMPLE_BACKENDS: &str = "S3DFslurm:
    type: slurm
    queue_name: milano
    project_name: lcls:tmox42619
";

/// The notification sent when the first run of that job completes.
pub const EXAMPLE_CALLBACK: &str = "jobid: 76312231.123
jobndx: 1
state: completed
info: 0
";
