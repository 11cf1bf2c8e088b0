use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rustls::ClientConfig;

use super::{PipelineError, WorkerInfo};
use crate::identity::tls::client_config;
use crate::identity::{load_cert_file, Identity};
use crate::net::BlockingStream;
use crate::wire::config::{DisconnectPolicy, FileHandlerParams, StreamHandlerParams};
use crate::wire::frame::header;

/// Terminal consumer of serialized blobs.
pub trait DataHandler: Send {
    fn name(&self) -> &'static str;
    fn handle(&mut self, blob: &[u8]) -> Result<(), String>;
    fn finish(&mut self) -> Result<(), String> {
        Ok(())
    }
    /// Blobs accepted but discarded.
    fn dropped(&self) -> u64 {
        0
    }
}

/// Expands `{run_id}`, `{worker}`, `{seq}` and zero-padded `{seq:NN}` / `{worker:NN}`.
pub fn expand_pattern(pattern: &str, run_id: &str, seq: u64, worker: u32) -> String {
    let mut out = String::with_capacity(pattern.len() + 8);
    let mut rest = pattern;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let Some(close) = rest[open..].find('}') else {
            out.push_str(&rest[open..]);
            return out;
        };
        let token = &rest[open + 1..open + close];
        let (key, width) = match token.split_once(':') {
            Some((k, w)) => (k, w.parse::<usize>().ok()),
            None => (token, None),
        };
        let num = |n: u64| match width {
            Some(w) => format!("{n:0w$}"),
            None => n.to_string(),
        };
        match key {
            "run_id" => out.push_str(run_id),
            "seq" => out.push_str(&num(seq)),
            "worker" => out.push_str(&num(worker as u64)),
            _ => out.push_str(&rest[open..=open + close]),
        }
        rest = &rest[open + close + 1..];
    }
    out.push_str(rest);
    out
}

/// Writes each blob to its own file, atomically.
pub struct FileHandler {
    dir: PathBuf,
    pattern: String,
    run_id: String,
    worker: u32,
    seq: u64,
    written: Vec<PathBuf>,
}

impl FileHandler {
    pub fn new(p: &FileHandlerParams, worker: WorkerInfo) -> Result<Self, PipelineError> {
        let load = |e: std::io::Error| PipelineError::Load(format!("output directory {}: {e}", p.directory.display()));
        std::fs::create_dir_all(&p.directory).map_err(load)?;
        // Probe writability now rather than after the first batch.
        tempfile::NamedTempFile::new_in(&p.directory).map_err(load)?;
        // Workers sharing a directory would otherwise collide on names.
        let pattern = if worker.count > 1 && !p.filename_pattern.contains("{worker") {
            format!("w{{worker:03}}_{}", p.filename_pattern)
        } else {
            p.filename_pattern.clone()
        };
        Ok(FileHandler {
            dir: p.directory.clone(),
            pattern,
            run_id: p.run_id.clone(),
            worker: worker.index,
            seq: 0,
            written: Vec::new(),
        })
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    /// Writes one blob; readers see either nothing or the complete file.
    pub fn write(&mut self, blob: &[u8]) -> std::io::Result<PathBuf> {
        let name = expand_pattern(&self.pattern, &self.run_id, self.seq, self.worker);
        let path = self.dir.join(name);
        let dir = path.parent().unwrap_or(Path::new("."));
        std::fs::create_dir_all(dir)?;
        let mut tmp = tempfile::Builder::new().prefix(".partial-").tempfile_in(dir)?;
        tmp.write_all(blob)?;
        tmp.flush()?;
        // Never overwrite earlier output.
        tmp.persist_noclobber(&path).map_err(|e| e.error)?;
        self.seq += 1;
        self.written.push(path.clone());
        Ok(path)
    }
}

impl DataHandler for FileHandler {
    fn name(&self) -> &'static str {
        "BinaryFileWritingDataHandler"
    }

    fn handle(&mut self, blob: &[u8]) -> Result<(), String> {
        self.write(blob).map(|_| ()).map_err(|e| format!("write failed: {e}"))
    }
}

/// Sends each blob as one frame to a relay ingest endpoint, reconnecting
/// with exponential backoff.
pub struct StreamHandler {
    endpoint: String,
    tls: Option<Arc<ClientConfig>>,
    policy: DisconnectPolicy,
    max_attempts: Option<u32>,
    base: Duration,
    cap: Duration,
    conn: Option<BlockingStream>,
    /// Consecutive failed connection attempts.
    failures: u32,
    next_attempt: Option<Instant>,
    pub dropped: u64,
    pub sent: u64,
}

/// Delay before retry `k` (0-based): `base * 2^k`, capped.
pub fn backoff_delay(base: Duration, cap: Duration, k: u32) -> Duration {
    base.checked_mul(1u32.checked_shl(k).unwrap_or(u32::MAX)).unwrap_or(cap).min(cap)
}

impl StreamHandler {
    pub fn new(p: &StreamHandlerParams) -> Result<Self, PipelineError> {
        let tls = match &p.tls {
            None => None,
            Some(t) => {
                let err = |e: crate::identity::IdentityError| PipelineError::Load(format!("stream handler TLS: {e}"));
                let id = Identity::load(&t.identity).map_err(err)?;
                let issuer = load_cert_file(&t.issuer).map_err(err)?;
                Some(client_config(Some(&id), issuer).map_err(err)?)
            }
        };
        Ok(StreamHandler {
            endpoint: p.endpoint.clone(),
            tls,
            policy: p.on_disconnect,
            max_attempts: p.max_attempts,
            base: Duration::from_millis(p.backoff_base_ms),
            cap: Duration::from_millis(p.backoff_cap_ms),
            conn: None,
            failures: 0,
            next_attempt: None,
            dropped: 0,
            sent: 0,
        })
    }

    fn try_connect(&mut self) -> Result<bool, String> {
        match BlockingStream::connect(&self.endpoint, self.tls.clone(), Some(Duration::from_secs(5))) {
            Ok(s) => {
                self.conn = Some(s);
                self.failures = 0;
                self.next_attempt = None;
                Ok(true)
            }
            Err(e) => {
                self.failures += 1;
                if self.max_attempts.is_some_and(|m| self.failures > m) {
                    return Err(format!(
                        "cannot reach {} after {} retries: {e}",
                        self.endpoint,
                        self.failures - 1
                    ));
                }
                let delay = backoff_delay(self.base, self.cap, self.failures - 1);
                self.next_attempt = Some(Instant::now() + delay);
                Ok(false)
            }
        }
    }

    /// Connects, sleeping between attempts, until connected or out of retries.
    fn connect_blocking(&mut self) -> Result<(), String> {
        loop {
            if let Some(at) = self.next_attempt {
                std::thread::sleep(at.saturating_duration_since(Instant::now()));
            }
            if self.try_connect()? {
                return Ok(());
            }
        }
    }

    fn send(&mut self, blob: &[u8]) -> std::io::Result<()> {
        let conn = self.conn.as_mut().expect("connected");
        conn.write_all(&header(blob.len() as u64))?;
        conn.write_all(blob)?;
        conn.flush()
    }
}

impl DataHandler for StreamHandler {
    fn name(&self) -> &'static str {
        "BinaryDataStreamingDataHandler"
    }

    fn handle(&mut self, blob: &[u8]) -> Result<(), String> {
        loop {
            // A relay that went away since the last blob shows up as a closed socket.
            if self.conn.as_ref().is_some_and(|c| c.peer_closed()) {
                self.conn = None;
            }
            if self.conn.is_none() {
                match self.policy {
                    DisconnectPolicy::Block => self.connect_blocking()?,
                    DisconnectPolicy::Drop => {
                        let due = self.next_attempt.is_none_or(|t| Instant::now() >= t);
                        if !(due && self.try_connect()?) {
                            self.dropped += 1;
                            return Ok(());
                        }
                    }
                }
            }
            match self.send(blob) {
                Ok(()) => {
                    self.sent += 1;
                    return Ok(());
                }
                Err(e) => {
                    tracing::warn!("stream to {} failed: {e}; reconnecting", self.endpoint);
                    self.conn = None;
                }
            }
        }
    }

    fn dropped(&self) -> u64 {
        self.dropped
    }

    fn finish(&mut self) -> Result<(), String> {
        if let Some(c) = self.conn.take() {
            let _ = c.tcp().shutdown(std::net::Shutdown::Write);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pattern_expansion() {
        let names: Vec<String> = (0..3).map(|s| expand_pattern("batch_{seq:05}.lsc1", "r", s, 0)).collect();
        assert_eq!(names, ["batch_00000.lsc1", "batch_00001.lsc1", "batch_00002.lsc1"]);
        assert_eq!(expand_pattern("{run_id}/w{worker:03}_{seq}.lsc1", "run7", 12, 4), "run7/w004_12.lsc1");
        assert_eq!(expand_pattern("odd_{x}_{seq", "r", 1, 0), "odd_{x}_{seq");
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let b = Duration::from_millis(100);
        let c = Duration::from_secs(10);
        let d: Vec<u64> = (0..9).map(|k| backoff_delay(b, c, k).as_millis() as u64).collect();
        assert_eq!(d, [100, 200, 400, 800, 1600, 3200, 6400, 10000, 10000]);
        assert_eq!(backoff_delay(b, c, 40), c);
    }

    #[test]
    fn file_handler_writes_numbered_atomic_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = FileHandlerParams {
            directory: dir.path().to_path_buf(),
            filename_pattern: "batch_{seq:05}.lsc1".into(),
            run_id: "run".into(),
        };
        let mut h = FileHandler::new(&p, WorkerInfo::single()).unwrap();
        for _ in 0..3 {
            h.handle(b"LSC1\x01\0\0\0\0").unwrap();
        }
        let mut names: Vec<String> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert_eq!(names, ["batch_00000.lsc1", "batch_00001.lsc1", "batch_00002.lsc1"]);
        assert!(std::fs::read(dir.path().join("batch_00000.lsc1")).unwrap().starts_with(b"LSC1"));
        // a second handler on the same directory refuses to clobber
        let mut again = FileHandler::new(&p, WorkerInfo::single()).unwrap();
        assert!(again.handle(b"x").is_err());
    }

    #[test]
    fn exhausted_retries_take_the_backoff_sum() {
        // Reserve a port and close it so that connections are refused.
        let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let p = StreamHandlerParams {
            endpoint: format!("127.0.0.1:{port}"),
            max_attempts: Some(3),
            backoff_base_ms: 100,
            backoff_cap_ms: 10_000,
            on_disconnect: DisconnectPolicy::Block,
            tls: None,
        };
        let mut h = StreamHandler::new(&p).unwrap();
        let t0 = Instant::now();
        let err = h.handle(b"blob").unwrap_err();
        let took = t0.elapsed().as_secs_f64();
        assert!(err.contains("after 3 retries"), "{err}");
        assert!((0.7..1.2).contains(&took), "{took}");
    }

    #[test]
    fn drop_policy_discards_while_down() {
        let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let p = StreamHandlerParams {
            endpoint: format!("127.0.0.1:{port}"),
            max_attempts: None,
            backoff_base_ms: 1000,
            backoff_cap_ms: 10_000,
            on_disconnect: DisconnectPolicy::Drop,
            tls: None,
        };
        let mut h = StreamHandler::new(&p).unwrap();
        for _ in 0..5 {
            h.handle(b"blob").unwrap();
        }
        assert_eq!((h.dropped, h.sent), (5, 0));
    }
}
