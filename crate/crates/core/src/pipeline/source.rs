use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use super::event::{splitmix64, Event};
use super::{PipelineError, WorkerInfo};
use crate::wire::config::{FileReplayParams, SyntheticSourceParams};
use crate::wire::decode_container;

/// Produces events until the source is exhausted.
pub trait EventSource: Send {
    fn next_event(&mut self) -> Result<Option<Event>, PipelineError>;
}

/// Token bucket used to cap the offered event rate.
#[derive(Debug)]
pub struct TokenBucket {
    rate: f64,
    burst: f64,
    tokens: f64,
    last: Instant,
}

impl TokenBucket {
    pub fn new(rate: f64, burst: f64) -> Self {
        let burst = burst.max(1.0);
        TokenBucket {
            rate,
            burst,
            tokens: burst,
            last: Instant::now(),
        }
    }

    /// Time to wait before one token is available at `now`, taking it if so.
    pub fn try_take(&mut self, now: Instant) -> Option<Duration> {
        let dt = now.saturating_duration_since(self.last).as_secs_f64();
        self.last = now;
        self.tokens = (self.tokens + dt * self.rate).min(self.burst);
        if self.tokens >= 1.0 {
            self.tokens -= 1.0;
            None
        } else {
            Some(Duration::from_secs_f64((1.0 - self.tokens) / self.rate))
        }
    }

    pub fn take(&mut self) {
        while let Some(wait) = self.try_take(Instant::now()) {
            std::thread::sleep(wait);
        }
    }
}

/// Deterministic pseudo-random event stream.
///
/// Workers get disjoint streams by mixing the worker index into the seed;
/// every worker emits `max_events` events.
pub struct SyntheticEventSource {
    seed: u64,
    next: u64,
    max: Option<u64>,
    worker: WorkerInfo,
    bucket: Option<TokenBucket>,
}

impl SyntheticEventSource {
    pub fn new(p: &SyntheticSourceParams, worker: WorkerInfo) -> Self {
        let seed = if worker.count > 1 {
            splitmix64(p.seed ^ splitmix64(worker.index as u64 + 1))
        } else {
            p.seed
        };
        SyntheticEventSource {
            seed,
            next: 0,
            max: p.max_events,
            worker,
            bucket: p.rate.filter(|r| *r > 0.0).map(|r| TokenBucket::new(r, p.burst.unwrap_or(r))),
        }
    }
}

impl EventSource for SyntheticEventSource {
    fn next_event(&mut self) -> Result<Option<Event>, PipelineError> {
        if self.max.is_some_and(|m| self.next >= m) {
            return Ok(None);
        }
        if let Some(b) = &mut self.bucket {
            b.take();
        }
        let seq = self.next;
        self.next += 1;
        Ok(Some(Event {
            sequence_number: seq,
            id: seq * self.worker.count as u64 + self.worker.index as u64,
            seed: splitmix64(self.seed.wrapping_add(seq)),
            raw: BTreeMap::new(),
        }))
    }
}

/// Replays events from recorded LSC1 files, one event per row.
///
/// With several workers, worker `i` of `n` takes global rows `i, i+n, ...`.
pub struct FileReplayEventSource {
    files: VecDeque<PathBuf>,
    pending: VecDeque<Event>,
    global: u64,
    worker: WorkerInfo,
}

fn replay_files(path: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let meta = std::fs::metadata(path)
        .map_err(|e| PipelineError::Load(format!("replay source {}: {e}", path.display())))?;
    if meta.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| PipelineError::Load(format!("replay source {}: {e}", path.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "lsc1"))
        .collect();
    files.sort();
    Ok(files)
}

impl FileReplayEventSource {
    pub fn new(p: &FileReplayParams, worker: WorkerInfo) -> Result<Self, PipelineError> {
        Ok(FileReplayEventSource {
            files: replay_files(&p.path)?.into(),
            pending: VecDeque::new(),
            global: 0,
            worker,
        })
    }

    fn load_next_file(&mut self) -> Result<bool, PipelineError> {
        let Some(path) = self.files.pop_front() else {
            return Ok(false);
        };
        let bytes = std::fs::read(&path).map_err(|e| PipelineError::Source(format!("{}: {e}", path.display())))?;
        let batch = decode_container(&bytes).map_err(|e| PipelineError::Source(format!("{}: {e}", path.display())))?;
        let rows = batch.values().next().and_then(|a| a.leading_dim()).unwrap_or(0);
        for i in 0..rows {
            let g = self.global;
            self.global += 1;
            if g % self.worker.count as u64 != self.worker.index as u64 {
                continue;
            }
            let raw = batch
                .iter()
                .map(|(k, a)| (k.clone(), a.row(i).expect("row within leading dim")))
                .collect();
            self.pending.push_back(Event {
                sequence_number: g,
                id: g,
                seed: splitmix64(g),
                raw,
            });
        }
        Ok(true)
    }
}

impl EventSource for FileReplayEventSource {
    fn next_event(&mut self) -> Result<Option<Event>, PipelineError> {
        loop {
            if let Some(e) = self.pending.pop_front() {
                return Ok(Some(e));
            }
            if !self.load_next_file()? {
                return Ok(None);
            }
        }
    }
}
