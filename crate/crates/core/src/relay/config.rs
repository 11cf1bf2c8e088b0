use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::OverflowPolicy;
use crate::wire::DEFAULT_MAX_FRAME;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Capacity {
    #[serde(default = "Capacity::default_frames")]
    pub frames: usize,
    #[serde(default = "Capacity::default_bytes")]
    pub bytes: u64,
}

impl Capacity {
    fn default_frames() -> usize {
        1024
    }
    fn default_bytes() -> u64 {
        4 << 30
    }
}

impl Default for Capacity {
    fn default() -> Self {
        Capacity {
            frames: Self::default_frames(),
            bytes: Self::default_bytes(),
        }
    }
}

/// Per-consumer outbound window. A consumer whose window is full is skipped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Window {
    #[serde(default = "Window::default_frames")]
    pub frames: usize,
    #[serde(default = "Window::default_bytes")]
    pub bytes: u64,
}

impl Window {
    fn default_frames() -> usize {
        4
    }
    fn default_bytes() -> u64 {
        64 << 20
    }
}

impl Default for Window {
    fn default() -> Self {
        Window {
            frames: Self::default_frames(),
            bytes: Self::default_bytes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelayTls {
    /// Directory holding this relay's identity.
    pub identity: PathBuf,
    /// Issuer certificate that producers and consumers must chain to.
    pub peer_issuer: PathBuf,
    /// Issuer pinned for the upstream relay; defaults to `peer_issuer`.
    #[serde(default)]
    pub upstream_issuer: Option<PathBuf>,
    /// Signature database consulted for revocation.
    #[serde(default)]
    pub signature_db: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelayConfig {
    pub ingest_endpoint: String,
    pub egress_endpoint: String,
    #[serde(default)]
    pub capacity: Capacity,
    #[serde(default)]
    pub overflow_policy: OverflowPolicy,
    /// Egress endpoint of another relay to pull frames from.
    #[serde(default)]
    pub upstream: Option<String>,
    #[serde(default)]
    pub tls: Option<RelayTls>,
    /// Plain HTTP endpoint serving `GET /stats`.
    #[serde(default)]
    pub admin_endpoint: Option<String>,
    #[serde(default)]
    pub consumer_window: Window,
    #[serde(default = "default_max_frame")]
    pub max_frame: u64,
}

fn default_max_frame() -> u64 {
    DEFAULT_MAX_FRAME
}

impl RelayConfig {
    /// Loopback relay on ephemeral ports with default limits.
    pub fn local() -> Self {
        RelayConfig {
            ingest_endpoint: "127.0.0.1:0".into(),
            egress_endpoint: "127.0.0.1:0".into(),
            capacity: Capacity::default(),
            overflow_policy: OverflowPolicy::Block,
            upstream: None,
            tls: None,
            admin_endpoint: None,
            consumer_window: Window::default(),
            max_frame: DEFAULT_MAX_FRAME,
        }
    }

    pub fn from_yaml(text: &str) -> Result<Self, String> {
        let cfg: RelayConfig = serde_yaml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_yaml(&text)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.capacity.frames < 1 || self.capacity.bytes < 1 {
            return Err("capacity must allow at least one frame and one byte".into());
        }
        if self.consumer_window.frames < 1 || self.consumer_window.bytes < 1 {
            return Err("consumer_window must allow at least one frame and one byte".into());
        }
        // Port 0 asks the OS for a fresh port, so such endpoints never clash.
        let fixed = |e: &str| !e.ends_with(":0");
        let mut eps = vec![("ingest_endpoint", &self.ingest_endpoint), ("egress_endpoint", &self.egress_endpoint)];
        if let Some(a) = &self.admin_endpoint {
            eps.push(("admin_endpoint", a));
        }
        for (i, (na, a)) in eps.iter().enumerate() {
            for (nb, b) in &eps[i + 1..] {
                if a == b && fixed(a) {
                    return Err(format!("{na} and {nb} must differ (both {a})"));
                }
            }
        }
        if let Some(up) = &self.upstream {
            if fixed(up) && (up == &self.ingest_endpoint || up == &self.egress_endpoint) {
                return Err(format!("upstream {up} points at this relay"));
            }
        }
        Ok(())
    }
}
