//! Named, trusted services: nickname -> URL plus the issuer to pin.

use std::fs;
use std::path::{Path, PathBuf};

use rustls::pki_types::CertificateDer;
use serde::{Deserialize, Serialize};

use super::{io_err, parse_cert_pem, IdentityError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrustEntry {
    pub nickname: String,
    pub url: String,
    /// PEM of the issuer that must have signed the service's certificate.
    pub issuer_pem: String,
}

impl TrustEntry {
    pub fn issuer(&self) -> Result<CertificateDer<'static>, IdentityError> {
        parse_cert_pem(&self.issuer_pem)
    }
}

/// A trust store is one JSON file; each service keeps its own.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrustStore {
    #[serde(default)]
    entries: Vec<TrustEntry>,
    #[serde(skip)]
    path: Option<PathBuf>,
}

impl TrustStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Opens the store at `path`; a missing file is an empty store.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, IdentityError> {
        let path = path.into();
        let mut store = match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice::<TrustStore>(&bytes).map_err(|e| IdentityError::Store {
                path: path.clone(),
                message: e.to_string(),
            })?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => TrustStore::default(),
            Err(e) => return Err(io_err(&path)(e)),
        };
        store.path = Some(path);
        Ok(store)
    }

    pub fn save(&self) -> Result<(), IdentityError> {
        let Some(path) = &self.path else { return Ok(()) };
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
        serde_json::to_writer_pretty(tmp.as_file(), self).map_err(|e| IdentityError::Store {
            path: path.clone(),
            message: e.to_string(),
        })?;
        tmp.persist(path).map_err(|e| io_err(path)(e.error))?;
        Ok(())
    }

    /// Adds an entry. The issuer PEM must parse.
    pub fn add(&mut self, nickname: &str, url: &str, issuer_pem: &str) -> Result<(), IdentityError> {
        if self.entries.iter().any(|e| e.nickname == nickname) {
            return Err(IdentityError::DuplicateNickname(nickname.to_string()));
        }
        parse_cert_pem(issuer_pem)?;
        self.entries.push(TrustEntry {
            nickname: nickname.to_string(),
            url: url.trim_end_matches('/').to_string(),
            issuer_pem: issuer_pem.to_string(),
        });
        Ok(())
    }

    pub fn remove(&mut self, nickname: &str) -> bool {
        let before = self.entries.len();
        self.entries.retain(|e| e.nickname != nickname);
        before != self.entries.len()
    }

    pub fn nicknames(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.nickname.as_str()).collect()
    }

    pub fn entries(&self) -> &[TrustEntry] {
        &self.entries
    }

    pub fn resolve(&self, nickname: &str) -> Result<&TrustEntry, IdentityError> {
        self.entries
            .iter()
            .find(|e| e.nickname == nickname)
            .ok_or_else(|| IdentityError::UnknownNickname {
                nickname: nickname.to_string(),
                known: self.nicknames().join(", "),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::Identity;

    #[test]
    fn resolve_and_unknown() {
        let ca = Identity::generate("ca").unwrap();
        let mut s = TrustStore::new();
        s.add("jobs-api", "https://127.0.0.1:9000/", &ca.certificate_pem()).unwrap();
        let e = s.resolve("jobs-api").unwrap();
        assert_eq!(e.url, "https://127.0.0.1:9000");
        assert_eq!(&e.issuer().unwrap(), ca.certificate());
        let err = s.resolve("nope").unwrap_err().to_string();
        assert!(err.contains("jobs-api"), "{err}");
        assert!(matches!(
            s.add("jobs-api", "x", &ca.certificate_pem()),
            Err(IdentityError::DuplicateNickname(_))
        ));
    }

    #[test]
    fn stores_are_independent() {
        let ca1 = Identity::generate("ca1").unwrap();
        let ca2 = Identity::generate("ca2").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut a = TrustStore::open(dir.path().join("a.json")).unwrap();
        let mut b = TrustStore::open(dir.path().join("b.json")).unwrap();
        a.add("svc", "https://a", &ca1.certificate_pem()).unwrap();
        b.add("svc", "https://b", &ca2.certificate_pem()).unwrap();
        a.save().unwrap();
        b.save().unwrap();
        let a = TrustStore::open(dir.path().join("a.json")).unwrap();
        let b = TrustStore::open(dir.path().join("b.json")).unwrap();
        assert_eq!(&a.resolve("svc").unwrap().issuer().unwrap(), ca1.certificate());
        assert_eq!(&b.resolve("svc").unwrap().issuer().unwrap(), ca2.certificate());
        assert_eq!(b.resolve("svc").unwrap().url, "https://b");
    }
}
