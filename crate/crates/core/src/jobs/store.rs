use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::callback::Notifier;
use super::script::{emit_slurm_script, local_script};
use super::spec::{BackendType, Backends, Callback, JobSpec};
use super::JobState;
use crate::wire::ConfigErrors;

/// One line of `status.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatusLine {
    /// Seconds since the unix epoch.
    pub t: f64,
    pub state: JobState,
    /// Exit code, signal-derived code, or 0.
    pub info: i64,
    /// Run index, starting at 1.
    pub jobndx: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub jobid: String,
    pub spec: JobSpec,
    pub history: Vec<StatusLine>,
}

impl JobRecord {
    pub fn current(&self) -> &StatusLine {
        self.history.last().expect("loaded records have history")
    }

    pub fn state(&self) -> JobState {
        self.current().state
    }

    pub fn jobndx(&self) -> u32 {
        self.current().jobndx
    }
}

#[derive(Debug, thiserror::Error)]
pub enum JobError {
    #[error("no such job {0}")]
    NotFound(String),
    #[error("job {jobid}: illegal transition {from} -> {to}")]
    Illegal { jobid: String, from: JobState, to: JobState },
    #[error("job {0} is already terminal")]
    AlreadyTerminal(String),
    #[error("job {0} has not finished")]
    NotTerminal(String),
    #[error("invalid job: {0}")]
    Invalid(ConfigErrors),
    #[error("job {jobid}: corrupt {file}: {message}")]
    Corrupt { jobid: String, file: &'static str, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> JobError + '_ {
    move |source| JobError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn now_secs() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default().as_secs_f64()
}

/// Parses `status.jsonl`. A final line without its newline is a write that
/// never finished and is ignored.
pub fn parse_history(jobid: &str, text: &str) -> Result<Vec<StatusLine>, JobError> {
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    complete
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| JobError::Corrupt {
                jobid: jobid.to_string(),
                file: "status.jsonl",
                message: e.to_string(),
            })
        })
        .collect()
}

/// True when `history` is a legal sequence: each run starts queued, follows
/// the successor relation, and a new run only starts after a terminal state.
pub fn history_is_legal(history: &[StatusLine]) -> bool {
    let Some(first) = history.first() else { return false };
    if first.state != JobState::Queued || first.jobndx != 1 {
        return false;
    }
    history.windows(2).all(|w| {
        let (a, b) = (&w[0], &w[1]);
        if b.jobndx == a.jobndx {
            a.state.can_reach(b.state)
        } else {
            b.jobndx == a.jobndx + 1 && a.state.is_terminal() && b.state == JobState::Queued
        }
    })
}

/// A directory of jobs, one folder per job:
///
/// ```text
/// <root>/<jobid>/spec.json
///               /status.jsonl
///               /log/<jobndx>.out, log/<jobndx>.err
///               /work/
///               /scripts/run
/// ```
///
/// Every mutation of a job holds an exclusive lock on `<jobid>/.lock`, so
/// several processes may share a store.
pub struct JobStore {
    root: PathBuf,
    backends: Backends,
    reached_cmd: String,
    notifier: Option<Notifier>,
}

impl JobStore {
    pub fn open(root: impl Into<PathBuf>, backends: Backends) -> Result<Self, JobError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_at(&root))?;
        let reached_cmd = format!("detstream psk --root {}", super::script::shell_quote(&root.display().to_string()));
        Ok(JobStore {
            root,
            backends,
            reached_cmd,
            notifier: None,
        })
    }

    /// Delivers callbacks through `n` instead of not at all.
    pub fn with_notifier(mut self, n: Notifier) -> Self {
        self.notifier = Some(n);
        self
    }

    pub fn notifier(&self) -> Option<&Notifier> {
        self.notifier.as_ref()
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn backends(&self) -> &Backends {
        &self.backends
    }

    pub fn job_dir(&self, jobid: &str) -> PathBuf {
        self.root.join(jobid)
    }

    pub fn log_path(&self, jobid: &str, jobndx: u32, stream: &str) -> PathBuf {
        self.job_dir(jobid).join("log").join(format!("{jobndx}.{stream}"))
    }

    /// Directory the job's script runs in.
    pub fn work_dir(&self, jobid: &str, spec: &JobSpec) -> PathBuf {
        spec.directory.clone().unwrap_or_else(|| self.job_dir(jobid).join("work"))
    }

    fn valid_id(jobid: &str) -> bool {
        !jobid.is_empty() && jobid.bytes().all(|b| b.is_ascii_digit() || b == b'.') && !jobid.starts_with('.')
    }

    fn lock(&self, jobid: &str) -> Result<File, JobError> {
        let dir = self.job_dir(jobid);
        if !Self::valid_id(jobid) || !dir.join("spec.json").exists() {
            return Err(JobError::NotFound(jobid.to_string()));
        }
        let path = dir.join(".lock");
        let f = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(io_at(&path))?;
        f.lock().map_err(io_at(&path))?;
        Ok(f)
    }

    /// Allocates `<unix-seconds>.<n>` with the smallest free `n >= 1`.
    /// Directory creation is the allocation, so concurrent creators never
    /// share an id.
    fn allocate(&self) -> Result<String, JobError> {
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default().as_secs();
        for n in 1u64.. {
            let id = format!("{secs}.{n}");
            let dir = self.job_dir(&id);
            match fs::create_dir(&dir) {
                Ok(()) => return Ok(id),
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(io_at(&dir)(e)),
            }
        }
        unreachable!()
    }

    /// Writes a new job and records it as queued.
    pub fn create(&self, spec: &JobSpec) -> Result<String, JobError> {
        let backend = self.backends.get(&spec.backend).ok_or_else(|| {
            JobError::Invalid(ConfigErrors(vec![crate::wire::ConfigError {
                path: "/backend".into(),
                message: format!("unknown backend {:?}", spec.backend),
            }]))
        })?;
        let id = self.allocate()?;
        let dir = self.job_dir(&id);
        for sub in ["log", "work", "scripts"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(io_at(&p))?;
        }
        let script = match backend.kind {
            BackendType::Local => local_script(&id, spec, backend),
            BackendType::SlurmScript => emit_slurm_script(&id, spec, backend, &dir, &self.reached_cmd),
        };
        let run = dir.join("scripts").join("run");
        write_atomic(&run, script.as_bytes())?;
        fs::set_permissions(&run, fs::Permissions::from_mode(0o755)).map_err(io_at(&run))?;
        let _lock = {
            let path = dir.join(".lock");
            let f = File::create(&path).map_err(io_at(&path))?;
            f.lock().map_err(io_at(&path))?;
            f
        };
        // spec.json last: its presence is what makes the job visible.
        let status = dir.join("status.jsonl");
        append_line(&status, &StatusLine {
            t: now_secs(),
            state: JobState::Queued,
            info: 0,
            jobndx: 1,
        })?;
        let spec_json = serde_json::to_vec_pretty(spec).expect("spec serialises");
        write_atomic(&dir.join("spec.json"), &spec_json)?;
        Ok(id)
    }

    pub fn get(&self, jobid: &str) -> Result<JobRecord, JobError> {
        let dir = self.job_dir(jobid);
        if !Self::valid_id(jobid) {
            return Err(JobError::NotFound(jobid.to_string()));
        }
        let spec_path = dir.join("spec.json");
        let spec_text = match fs::read(&spec_path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(JobError::NotFound(jobid.to_string())),
            Err(e) => return Err(io_at(&spec_path)(e)),
        };
        let spec = serde_json::from_slice(&spec_text).map_err(|e| JobError::Corrupt {
            jobid: jobid.to_string(),
            file: "spec.json",
            message: e.to_string(),
        })?;
        let status_path = dir.join("status.jsonl");
        let text = fs::read_to_string(&status_path).map_err(io_at(&status_path))?;
        let history = parse_history(jobid, &text)?;
        if history.is_empty() {
            return Err(JobError::Corrupt {
                jobid: jobid.to_string(),
                file: "status.jsonl",
                message: "no states recorded".into(),
            });
        }
        Ok(JobRecord {
            jobid: jobid.to_string(),
            spec,
            history,
        })
    }

    /// Every readable job, oldest first.
    pub fn list(&self) -> Result<Vec<JobRecord>, JobError> {
        let mut ids: Vec<(u64, u64, String)> = fs::read_dir(&self.root)
            .map_err(io_at(&self.root))?
            .filter_map(|e| e.ok()?.file_name().into_string().ok())
            .filter_map(|n| {
                let (s, c) = n.split_once('.')?;
                Some((s.parse().ok()?, c.parse().ok()?, n))
            })
            .collect();
        ids.sort();
        let mut out = Vec::new();
        for (_, _, id) in ids {
            match self.get(&id) {
                Ok(r) => out.push(r),
                // half-created jobs have no spec yet
                Err(JobError::NotFound(_)) => {}
                Err(e) => tracing::warn!("skipping job {id}: {e}"),
            }
        }
        Ok(out)
    }

    fn append(&self, rec: &JobRecord, state: JobState, info: i64, jobndx: u32) -> Result<StatusLine, JobError> {
        let line = StatusLine {
            t: now_secs(),
            state,
            info,
            jobndx,
        };
        append_line(&self.job_dir(&rec.jobid).join("status.jsonl"), &line)?;
        if let (Some(n), Some(url), Some(secret)) = (&self.notifier, &rec.spec.callback, &rec.spec.cb_secret) {
            n.send(
                url,
                secret,
                Callback {
                    jobid: rec.jobid.clone(),
                    jobndx,
                    state,
                    info,
                },
            );
        }
        Ok(line)
    }

    /// Records that the current run reached `state`.
    pub fn reached(&self, jobid: &str, state: JobState, info: i64) -> Result<StatusLine, JobError> {
        let _lock = self.lock(jobid)?;
        let rec = self.get(jobid)?;
        let cur = rec.current();
        if !cur.state.can_reach(state) {
            tracing::warn!("job {jobid}: rejected {} -> {state}", cur.state);
            return Err(JobError::Illegal {
                jobid: jobid.to_string(),
                from: cur.state,
                to: state,
            });
        }
        self.append(&rec, state, info, cur.jobndx)
    }

    /// Cancels a queued or active run; returns the state it was in.
    pub fn cancel(&self, jobid: &str) -> Result<JobState, JobError> {
        let _lock = self.lock(jobid)?;
        let rec = self.get(jobid)?;
        let cur = rec.current();
        if cur.state.is_terminal() {
            return Err(JobError::AlreadyTerminal(jobid.to_string()));
        }
        self.append(&rec, JobState::Canceled, 0, cur.jobndx)?;
        Ok(cur.state)
    }

    /// Queues a new run of a finished job; returns its run index.
    pub fn rerun(&self, jobid: &str) -> Result<u32, JobError> {
        let _lock = self.lock(jobid)?;
        let rec = self.get(jobid)?;
        let cur = rec.current();
        if !cur.state.is_terminal() {
            return Err(JobError::NotTerminal(jobid.to_string()));
        }
        let ndx = cur.jobndx + 1;
        self.append(&rec, JobState::Queued, 0, ndx)?;
        Ok(ndx)
    }

    /// The last `n` lines of a log, or all of it.
    pub fn read_log(&self, jobid: &str, jobndx: u32, stream: &str, tail: Option<usize>) -> Result<String, JobError> {
        self.get(jobid)?;
        let path = self.log_path(jobid, jobndx, stream);
        let bytes = fs::read(&path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => JobError::NotFound(format!("{jobid} log {jobndx}.{stream}")),
            _ => io_at(&path)(e),
        })?;
        let text = String::from_utf8_lossy(&bytes).into_owned();
        Ok(match tail {
            None => text,
            Some(n) => {
                let lines: Vec<&str> = text.lines().collect();
                let mut out = lines[lines.len().saturating_sub(n)..].join("\n");
                if !out.is_empty() {
                    out.push('\n');
                }
                out
            }
        })
    }
}

/// One `write` of a whole line; lines never interleave or tear except by a
/// crash mid-write, which the reader tolerates.
fn append_line(path: &Path, line: &StatusLine) -> Result<(), JobError> {
    let mut text = serde_json::to_string(line).expect("status serialises");
    text.push('\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io_at(path))?;
    f.write_all(text.as_bytes()).map_err(io_at(path))?;
    f.sync_data().map_err(io_at(path))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), JobError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_at(dir))?;
    tmp.write_all(bytes).map_err(io_at(path))?;
    tmp.persist(path).map_err(|e| io_at(path)(e.error))?;
    Ok(())
}
