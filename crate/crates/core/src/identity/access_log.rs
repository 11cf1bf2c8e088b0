use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

/// One served request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRecord {
    /// RFC 3339, UTC.
    pub timestamp: String,
    /// Certified peer name; empty when the peer was not authenticated.
    pub peer: String,
    pub method: String,
    pub path: String,
    pub status: u16,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl AccessRecord {
    pub fn new(peer: &str, method: &str, path: &str, status: u16) -> Self {
        let timestamp = time::OffsetDateTime::now_utc()
            .format(&time::format_description::well_known::Rfc3339)
            .unwrap_or_default();
        AccessRecord {
            timestamp,
            peer: peer.to_string(),
            method: method.to_string(),
            path: path.to_string(),
            status,
            error: None,
        }
    }

    pub fn with_error(mut self, error: impl Into<String>) -> Self {
        self.error = Some(error.into());
        self
    }
}

enum Sink {
    File(File),
    Memory(Vec<String>),
    Null,
}

/// JSON-lines request log. Cloning shares the sink.
#[derive(Clone)]
pub struct AccessLog {
    sink: Arc<Mutex<Sink>>,
}

impl std::fmt::Debug for AccessLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("AccessLog")
    }
}

impl AccessLog {
    pub fn open(path: &Path) -> std::io::Result<Self> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(AccessLog {
            sink: Arc::new(Mutex::new(Sink::File(f))),
        })
    }

    /// Keeps lines in memory; see [`AccessLog::lines`].
    pub fn memory() -> Self {
        AccessLog {
            sink: Arc::new(Mutex::new(Sink::Memory(Vec::new()))),
        }
    }

    pub fn null() -> Self {
        AccessLog {
            sink: Arc::new(Mutex::new(Sink::Null)),
        }
    }

    pub fn record(&self, rec: &AccessRecord) {
        let line = serde_json::to_string(rec).expect("record serialises");
        match &mut *self.sink.lock() {
            Sink::File(f) => {
                let _ = writeln!(f, "{line}");
            }
            Sink::Memory(v) => v.push(line),
            Sink::Null => {}
        }
    }

    /// Lines captured by a memory log.
    pub fn lines(&self) -> Vec<String> {
        match &*self.sink.lock() {
            Sink::Memory(v) => v.clone(),
            _ => Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lines_parse_individually() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("access.jsonl");
        let log = AccessLog::open(&path).unwrap();
        log.record(&AccessRecord::new("alice", "GET", "/jobs", 200));
        log.record(&AccessRecord::new("", "-", "-", 401).with_error("untrusted-issuer"));
        let text = std::fs::read_to_string(&path).unwrap();
        let recs: Vec<AccessRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(recs.len(), 2);
        assert_eq!((recs[0].peer.as_str(), recs[0].path.as_str()), ("alice", "/jobs"));
        assert_eq!((recs[1].peer.as_str(), recs[1].status), ("", 401));
        assert!(time::OffsetDateTime::parse(&recs[0].timestamp, &time::format_description::well_known::Rfc3339).is_ok());
    }
}
