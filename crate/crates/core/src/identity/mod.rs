//! Ed25519 X.509 identities and everything built on them.
//!
//! Every deployment directory holds its own key pair. The private key is
//! written once, with owner-only permissions, and is never serialised
//! anywhere else: signing requests carry only public keys, and certificates
//! link a public key to a name.

pub mod access_log;
pub mod hmac;
pub mod signer;
pub mod tls;
pub mod trust;
pub mod verify;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime};

use rcgen::{
    BasicConstraints, CertificateParams, DistinguishedName, DnType, IsCa, KeyPair, KeyUsagePurpose,
    PKCS_ED25519,
};
use rustls::pki_types::pem::PemObject;
use rustls::pki_types::{CertificateDer, PrivateKeyDer, PrivatePkcs8KeyDer};
use thiserror::Error;
use x509_parser::prelude::{FromDer, X509Certificate};

pub use access_log::{AccessLog, AccessRecord};
pub use hmac::{sign_body, verify_body, SIGNATURE_HEADER};
pub use signer::{sign_identity, SignatureDb, SignatureRecord};
pub use trust::{TrustEntry, TrustStore};
pub use verify::{verify_peer, VerifyError};

pub const KEY_FILE: &str = "id.key";
pub const CERT_FILE: &str = "id.crt";
pub const CHAIN_FILE: &str = "chain.pem";

/// Default certificate lifetime.
pub const DEFAULT_VALIDITY: Duration = Duration::from_secs(90 * 24 * 3600);

#[derive(Debug, Error)]
pub enum IdentityError {
    #[error("identity already exists at {0} (use force to overwrite)")]
    Exists(PathBuf),
    #[error("identity name must not be empty")]
    EmptyName,
    #[error("certificate public key does not match the private key")]
    KeyMismatch,
    #[error("a live certificate for {name:?} with this key already exists (serial {serial})")]
    DuplicateCertificate { name: String, serial: u64 },
    #[error("unknown serial {0}")]
    UnknownSerial(u64),
    #[error("unknown nickname {nickname:?}; known: {known}")]
    UnknownNickname { nickname: String, known: String },
    #[error("duplicate nickname {0:?}")]
    DuplicateNickname(String),
    #[error("certificate error: {0}")]
    Certificate(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad store file {path}: {message}")]
    Store { path: PathBuf, message: String },
}

impl From<rcgen::Error> for IdentityError {
    fn from(e: rcgen::Error) -> Self {
        IdentityError::Certificate(e.to_string())
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IdentityError + '_ {
    move |source| IdentityError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A named Ed25519 key pair with its certificate.
pub struct Identity {
    name: String,
    key: KeyPair,
    cert: CertificateDer<'static>,
    chain: Vec<CertificateDer<'static>>,
}

impl fmt::Debug for Identity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Identity")
            .field("name", &self.name)
            .field("key", &"<redacted>")
            .field("chain_len", &self.chain.len())
            .finish()
    }
}

fn offset(t: SystemTime) -> time::OffsetDateTime {
    time::OffsetDateTime::from(t)
}

pub(crate) fn random_serial() -> rcgen::SerialNumber {
    let mut b: [u8; 16] = rand::random();
    b[0] &= 0x7f;
    b[0] |= 0x01;
    rcgen::SerialNumber::from_slice(&b)
}

impl Identity {
    /// Fresh key pair and self-signed certificate able to issue for others.
    pub fn generate(name: &str) -> Result<Self, IdentityError> {
        Self::generate_valid(name, SystemTime::now(), DEFAULT_VALIDITY)
    }

    pub fn generate_valid(name: &str, not_before: SystemTime, validity: Duration) -> Result<Self, IdentityError> {
        if name.trim().is_empty() {
            return Err(IdentityError::EmptyName);
        }
        let key = KeyPair::generate_for(&PKCS_ED25519)?;
        let mut params = CertificateParams::default();
        let mut dn = DistinguishedName::new();
        dn.push(DnType::CommonName, name);
        params.distinguished_name = dn;
        params.is_ca = IsCa::Ca(BasicConstraints::Unconstrained);
        params.key_usages = vec![
            KeyUsagePurpose::DigitalSignature,
            KeyUsagePurpose::KeyCertSign,
            KeyUsagePurpose::CrlSign,
        ];
        params.not_before = offset(not_before);
        params.not_after = offset(not_before + validity);
        params.serial_number = Some(random_serial());
        let cert = params.self_signed(&key)?;
        Ok(Identity {
            name: name.to_string(),
            key,
            cert: cert.der().clone(),
            chain: Vec::new(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn certificate(&self) -> &CertificateDer<'static> {
        &self.cert
    }

    pub fn certificate_pem(&self) -> String {
        pem_encode("CERTIFICATE", &self.cert)
    }

    /// This identity's certificate followed by its issuing chain.
    pub fn chain(&self) -> Vec<CertificateDer<'static>> {
        let mut v = vec![self.cert.clone()];
        v.extend(self.chain.iter().cloned());
        v
    }

    pub fn public_key_pem(&self) -> String {
        self.key.public_key_pem()
    }

    pub fn public_key_der(&self) -> Vec<u8> {
        use rcgen::PublicKeyData;
        self.key.subject_public_key_info()
    }

    pub(crate) fn key_pair(&self) -> &KeyPair {
        &self.key
    }

    pub(crate) fn private_key_der(&self) -> PrivateKeyDer<'static> {
        PrivateKeyDer::Pkcs8(PrivatePkcs8KeyDer::from(self.key.serialize_der()))
    }

    /// Replaces the certificate with one issued by someone else for the same key.
    pub fn install_certificate(
        &mut self,
        cert_pem: &str,
        chain: Vec<CertificateDer<'static>>,
    ) -> Result<(), IdentityError> {
        let cert = parse_cert_pem(cert_pem)?;
        check_key_matches(&cert, &self.public_key_der())?;
        self.name = certificate_name(&cert)?;
        self.cert = cert;
        self.chain = chain;
        Ok(())
    }

    /// Writes key, certificate and chain into `dir`.
    pub fn save(&self, dir: &Path, force: bool) -> Result<(), IdentityError> {
        let key_path = dir.join(KEY_FILE);
        if key_path.exists() && !force {
            return Err(IdentityError::Exists(dir.to_path_buf()));
        }
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_private(&key_path, self.key.serialize_pem().as_bytes())?;
        let cert_path = dir.join(CERT_FILE);
        fs::write(&cert_path, self.certificate_pem()).map_err(io_err(&cert_path))?;
        let chain_path = dir.join(CHAIN_FILE);
        if self.chain.is_empty() {
            let _ = fs::remove_file(&chain_path);
        } else {
            let pem: String = self.chain.iter().map(|c| pem_encode("CERTIFICATE", c)).collect();
            fs::write(&chain_path, pem).map_err(io_err(&chain_path))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, IdentityError> {
        let key_path = dir.join(KEY_FILE);
        let key_pem = fs::read_to_string(&key_path).map_err(io_err(&key_path))?;
        let key = KeyPair::from_pem(&key_pem)?;
        let cert_path = dir.join(CERT_FILE);
        let cert = parse_cert_pem(&fs::read_to_string(&cert_path).map_err(io_err(&cert_path))?)?;
        {
            use rcgen::PublicKeyData;
            check_key_matches(&cert, &key.subject_public_key_info())?;
        }
        let chain_path = dir.join(CHAIN_FILE);
        let chain = match fs::read(&chain_path) {
            Ok(bytes) => parse_certs_pem(&bytes)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(io_err(&chain_path)(e)),
        };
        Ok(Identity {
            name: certificate_name(&cert)?,
            key,
            cert,
            chain,
        })
    }
}

/// Creates and stores a new identity in `dir`.
pub fn new_identity(dir: &Path, name: &str, force: bool) -> Result<Identity, IdentityError> {
    if dir.join(KEY_FILE).exists() && !force {
        return Err(IdentityError::Exists(dir.to_path_buf()));
    }
    let id = Identity::generate(name)?;
    id.save(dir, force)?;
    Ok(id)
}

fn write_private(path: &Path, bytes: &[u8]) -> Result<(), IdentityError> {
    use std::os::unix::fs::OpenOptionsExt;
    let _ = fs::remove_file(path);
    let mut f = fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .mode(0o600)
        .open(path)
        .map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))
}

pub fn pem_encode(label: &str, der: &[u8]) -> String {
    use base64::Engine;
    let b64 = base64::engine::general_purpose::STANDARD.encode(der);
    let mut out = format!("-----BEGIN {label}-----\n");
    for chunk in b64.as_bytes().chunks(64) {
        out.push_str(std::str::from_utf8(chunk).unwrap());
        out.push('\n');
    }
    out.push_str(&format!("-----END {label}-----\n"));
    out
}

pub fn parse_cert_pem(pem: &str) -> Result<CertificateDer<'static>, IdentityError> {
    CertificateDer::from_pem_slice(pem.as_bytes())
        .map_err(|e| IdentityError::Certificate(format!("bad certificate PEM: {e}")))
}

pub fn parse_certs_pem(pem: &[u8]) -> Result<Vec<CertificateDer<'static>>, IdentityError> {
    CertificateDer::pem_slice_iter(pem)
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| IdentityError::Certificate(format!("bad certificate PEM: {e}")))
}

pub fn load_cert_file(path: &Path) -> Result<CertificateDer<'static>, IdentityError> {
    parse_cert_pem(&fs::read_to_string(path).map_err(io_err(path))?)
}

fn parse(der: &[u8]) -> Result<X509Certificate<'_>, IdentityError> {
    X509Certificate::from_der(der)
        .map(|(_, c)| c)
        .map_err(|e| IdentityError::Certificate(format!("unparseable certificate: {e}")))
}

/// Common name from the certificate subject.
pub fn certificate_name(der: &[u8]) -> Result<String, IdentityError> {
    let cert = parse(der)?;
    let cn = cert
        .subject()
        .iter_common_name()
        .next()
        .and_then(|cn| cn.as_str().ok())
        .ok_or_else(|| IdentityError::Certificate("certificate subject has no common name".into()))?;
    Ok(cn.to_string())
}

fn check_key_matches(cert: &[u8], spki_der: &[u8]) -> Result<(), IdentityError> {
    let c = parse(cert)?;
    if c.public_key().raw != spki_der {
        return Err(IdentityError::KeyMismatch);
    }
    Ok(())
}
