use std::collections::{HashMap, VecDeque};
use std::fs::File;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};

use super::store::JobStore;
use super::JobState;

/// Recorded as `info` when the script could not be started.
pub const INFO_SPAWN_FAILED: i64 = -1;
/// Recorded as `info` when the log files could not be created.
pub const INFO_LOG_FAILED: i64 = -2;
/// Recorded as `info` when the duration limit ran out.
pub const INFO_TIMEOUT: i64 = 124;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunnerConfig {
    /// Jobs executing at once.
    pub slots: usize,
    /// Length of one `duration` unit in seconds; 60 except in tests.
    pub minute_seconds: f64,
    /// Time between TERM and KILL when stopping a job.
    pub kill_grace_seconds: f64,
}

impl Default for RunnerConfig {
    fn default() -> Self {
        RunnerConfig {
            slots: 4,
            minute_seconds: 60.0,
            kill_grace_seconds: 5.0,
        }
    }
}

struct Inner {
    store: Arc<JobStore>,
    cfg: RunnerConfig,
    queue: Mutex<VecDeque<String>>,
    ready: Condvar,
    /// Cancel flags of running jobs.
    running: Mutex<HashMap<String, Arc<AtomicBool>>>,
    stop: AtomicBool,
}

/// Executes queued jobs of local backends on this machine.
///
/// For each job the runner records `active`, runs `scripts/run` with `sh`
/// in the job's directory, captures output to `log/<jobndx>.out|err`, and
/// records `completed` (exit 0) or `failed` with the exit code, 128 plus
/// the signal number, [`INFO_TIMEOUT`], or a negative code when the script
/// never started.
#[derive(Clone)]
pub struct LocalRunner {
    inner: Arc<Inner>,
    workers: Arc<Mutex<Vec<JoinHandle<()>>>>,
}

impl LocalRunner {
    pub fn start(store: Arc<JobStore>, cfg: RunnerConfig) -> Self {
        let inner = Arc::new(Inner {
            store,
            cfg,
            queue: Mutex::new(VecDeque::new()),
            ready: Condvar::new(),
            running: Mutex::new(HashMap::new()),
            stop: AtomicBool::new(false),
        });
        let workers = (0..cfg.slots.max(1))
            .map(|i| {
                let inner = inner.clone();
                std::thread::Builder::new()
                    .name(format!("job-slot-{i}"))
                    .spawn(move || worker(inner))
                    .expect("spawn runner thread")
            })
            .collect();
        LocalRunner {
            inner,
            workers: Arc::new(Mutex::new(workers)),
        }
    }

    pub fn store(&self) -> &Arc<JobStore> {
        &self.inner.store
    }

    /// Queues a job for execution.
    pub fn submit(&self, jobid: &str) {
        self.inner.queue.lock().push_back(jobid.to_string());
        self.inner.ready.notify_one();
    }

    /// Asks a running job to stop: TERM, then KILL after the grace period.
    /// Returns false if the job is not running here.
    pub fn kill(&self, jobid: &str) -> bool {
        match self.inner.running.lock().get(jobid) {
            Some(flag) => {
                flag.store(true, Ordering::SeqCst);
                true
            }
            None => false,
        }
    }

    pub fn running(&self) -> Vec<String> {
        self.inner.running.lock().keys().cloned().collect()
    }

    /// Stops accepting work, kills running jobs and joins the workers.
    pub fn shutdown(&self) {
        self.inner.stop.store(true, Ordering::SeqCst);
        for flag in self.inner.running.lock().values() {
            flag.store(true, Ordering::SeqCst);
        }
        self.inner.ready.notify_all();
        for w in self.workers.lock().drain(..) {
            let _ = w.join();
        }
    }
}

fn worker(inner: Arc<Inner>) {
    loop {
        let jobid = {
            let mut q = inner.queue.lock();
            loop {
                if inner.stop.load(Ordering::SeqCst) {
                    return;
                }
                if let Some(id) = q.pop_front() {
                    break id;
                }
                inner.ready.wait(&mut q);
            }
        };
        if let Err(e) = execute(&inner, &jobid) {
            tracing::warn!("job {jobid}: {e}");
        }
    }
}

fn signal_group(pid: u32, sig: i32) {
    // SAFETY: kill(2) with a negative pid signals the process group we created.
    unsafe {
        libc::kill(-(pid as i32), sig);
    }
}

fn execute(inner: &Inner, jobid: &str) -> Result<(), super::store::JobError> {
    let store = &inner.store;
    let rec = store.get(jobid)?;
    if rec.state() != JobState::Queued {
        return Ok(());
    }
    let flag = Arc::new(AtomicBool::new(false));
    inner.running.lock().insert(jobid.to_string(), flag.clone());
    let _guard = RunningGuard(inner, jobid);

    // Cancelled between dequeue and here: nothing to do.
    let ndx = match store.reached(jobid, JobState::Active, 0) {
        Ok(l) => l.jobndx,
        Err(super::store::JobError::Illegal { .. }) => return Ok(()),
        Err(e) => return Err(e),
    };
    let finish = |state: JobState, info: i64| match store.reached(jobid, state, info) {
        // a cancel got there first
        Ok(_) | Err(super::store::JobError::Illegal { .. }) => Ok(()),
        Err(e) => Err(e),
    };

    let logs = File::create(store.log_path(jobid, ndx, "out"))
        .and_then(|o| Ok((o, File::create(store.log_path(jobid, ndx, "err"))?)));
    let Ok((out, err)) = logs else {
        return finish(JobState::Failed, INFO_LOG_FAILED);
    };
    let child = Command::new("sh")
        .arg(store.job_dir(jobid).join("scripts").join("run"))
        .current_dir(store.work_dir(jobid, &rec.spec))
        .env("DETSTREAM_JOBID", jobid)
        .env("DETSTREAM_JOBNDX", ndx.to_string())
        .stdin(Stdio::null())
        .stdout(out)
        .stderr(err)
        .process_group(0)
        .spawn();
    let mut child = match child {
        Ok(c) => c,
        Err(e) => {
            tracing::warn!("job {jobid}: spawn failed: {e}");
            return finish(JobState::Failed, INFO_SPAWN_FAILED);
        }
    };
    let pid = child.id();
    let limit = Duration::from_secs_f64(rec.spec.resources.duration as f64 * inner.cfg.minute_seconds);
    let grace = Duration::from_secs_f64(inner.cfg.kill_grace_seconds);
    let deadline = Instant::now() + limit;
    let mut termed_at: Option<Instant> = None;
    let mut timed_out = false;
    let status = loop {
        match child.try_wait() {
            Ok(Some(s)) => break Some(s),
            Ok(None) => {}
            Err(_) => break None,
        }
        let now = Instant::now();
        match termed_at {
            None => {
                let cancelled = flag.load(Ordering::SeqCst);
                if cancelled || now >= deadline {
                    timed_out = !cancelled;
                    signal_group(pid, libc::SIGTERM);
                    termed_at = Some(now);
                }
            }
            Some(t) if now >= t + grace => {
                signal_group(pid, libc::SIGKILL);
                let _ = child.wait();
                break child.try_wait().ok().flatten();
            }
            Some(_) => {}
        }
        std::thread::sleep(Duration::from_millis(20));
    };
    if timed_out {
        return finish(JobState::Failed, INFO_TIMEOUT);
    }
    match status.map(|s| (s.code(), s.signal())) {
        Some((Some(0), _)) => finish(JobState::Completed, 0),
        Some((Some(c), _)) => finish(JobState::Failed, c as i64),
        Some((None, Some(sig))) => finish(JobState::Failed, 128 + sig as i64),
        _ => finish(JobState::Failed, INFO_SPAWN_FAILED),
    }
}

struct RunningGuard<'a>(&'a Inner, &'a str);

impl Drop for RunningGuard<'_> {
    fn drop(&mut self) {
        self.0.running.lock().remove(self.1);
    }
}
