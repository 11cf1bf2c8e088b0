//! Certificate issuing and the signature database.
//!
//! The signer only ever sees a subject's public key. It binds that key to a
//! caller-asserted name (there is no peer-credential check here) and records
//! every issued certificate so that it can later be revoked.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use rcgen::{
    CertificateParams, DistinguishedName, DnType, ExtendedKeyUsagePurpose, IsCa, Issuer,
    KeyUsagePurpose, SerialNumber, SubjectPublicKeyInfo,
};
use serde::{Deserialize, Serialize};

use super::{io_err, pem_encode, Identity, IdentityError, DEFAULT_VALIDITY};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignatureRecord {
    pub serial: u64,
    pub subject_name: String,
    /// Hex of the subject's DER SubjectPublicKeyInfo.
    pub subject_public_key: String,
    pub issued_at: u64,
    pub not_after: u64,
    pub revoked: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revoked_at: Option<u64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct DbFile {
    next_serial: u64,
    records: Vec<SignatureRecord>,
}

/// Single-file store of issued certificates.
///
/// Writes take an exclusive lock on a sibling `.lock` file and replace the
/// store atomically, so concurrent signers never lose records.
#[derive(Debug, Clone)]
pub struct SignatureDb {
    path: PathBuf,
}

fn unix(t: SystemTime) -> u64 {
    t.duration_since(UNIX_EPOCH).unwrap_or_default().as_secs()
}

impl SignatureDb {
    pub fn open(path: impl Into<PathBuf>) -> Self {
        SignatureDb { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn read(&self) -> Result<DbFile, IdentityError> {
        match fs::read(&self.path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| IdentityError::Store {
                path: self.path.clone(),
                message: e.to_string(),
            }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(DbFile {
                next_serial: 1,
                records: Vec::new(),
            }),
            Err(e) => Err(io_err(&self.path)(e)),
        }
    }

    fn update<T>(&self, f: impl FnOnce(&mut DbFile) -> Result<T, IdentityError>) -> Result<T, IdentityError> {
        let dir = self.path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let lock_path = self.path.with_extension("lock");
        let lock = fs::OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(io_err(&lock_path))?;
        lock.lock().map_err(io_err(&lock_path))?;
        let mut db = self.read()?;
        let out = f(&mut db)?;
        let tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
        serde_json::to_writer_pretty(tmp.as_file(), &db).map_err(|e| IdentityError::Store {
            path: self.path.clone(),
            message: e.to_string(),
        })?;
        tmp.as_file().sync_all().map_err(io_err(&self.path))?;
        tmp.persist(&self.path).map_err(|e| io_err(&self.path)(e.error))?;
        Ok(out)
    }

    pub fn records(&self) -> Result<Vec<SignatureRecord>, IdentityError> {
        Ok(self.read()?.records)
    }

    pub fn get(&self, serial: u64) -> Result<Option<SignatureRecord>, IdentityError> {
        Ok(self.read()?.records.into_iter().find(|r| r.serial == serial))
    }

    pub fn is_revoked(&self, serial: u64) -> Result<bool, IdentityError> {
        Ok(self.get(serial)?.is_some_and(|r| r.revoked))
    }

    /// Marks a certificate revoked. Revocation is permanent.
    pub fn revoke(&self, serial: u64) -> Result<SignatureRecord, IdentityError> {
        self.update(|db| {
            let rec = db
                .records
                .iter_mut()
                .find(|r| r.serial == serial)
                .ok_or(IdentityError::UnknownSerial(serial))?;
            if !rec.revoked {
                rec.revoked = true;
                rec.revoked_at = Some(unix(SystemTime::now()));
            }
            Ok(rec.clone())
        })
    }
}

/// Options for [`sign_identity`].
#[derive(Debug, Clone)]
pub struct SignOptions {
    pub not_before: SystemTime,
    pub validity: Duration,
}

impl Default for SignOptions {
    fn default() -> Self {
        SignOptions {
            not_before: SystemTime::now(),
            validity: DEFAULT_VALIDITY,
        }
    }
}

/// Issues a certificate binding `subject_public_key_pem` to `subject_name`.
///
/// Returns the certificate PEM and the database record.
pub fn sign_identity(
    issuer: &Identity,
    subject_public_key_pem: &str,
    subject_name: &str,
    db: &SignatureDb,
    opts: &SignOptions,
) -> Result<(String, SignatureRecord), IdentityError> {
    if subject_name.trim().is_empty() {
        return Err(IdentityError::EmptyName);
    }
    let spki = SubjectPublicKeyInfo::from_pem(subject_public_key_pem)?;
    let spki_hex = {
        use rcgen::PublicKeyData;
        hex::encode(spki.subject_public_key_info())
    };
    let ca = Issuer::from_ca_cert_der(issuer.certificate(), issuer.key_pair())?;
    let now = unix(SystemTime::now());
    db.update(|db| {
        if let Some(live) = db.records.iter().find(|r| {
            r.subject_name == subject_name && r.subject_public_key == spki_hex && !r.revoked && r.not_after > now
        }) {
            return Err(IdentityError::DuplicateCertificate {
                name: subject_name.to_string(),
                serial: live.serial,
            });
        }
        let serial = db.next_serial.max(1);
        db.next_serial = serial + 1;
        let mut params = CertificateParams::default();
        let mut dn = DistinguishedName::new();
        dn.push(DnType::CommonName, subject_name);
        params.distinguished_name = dn;
        params.is_ca = IsCa::NoCa;
        params.key_usages = vec![KeyUsagePurpose::DigitalSignature];
        params.extended_key_usages = vec![
            ExtendedKeyUsagePurpose::ClientAuth,
            ExtendedKeyUsagePurpose::ServerAuth,
        ];
        params.not_before = time::OffsetDateTime::from(opts.not_before);
        params.not_after = time::OffsetDateTime::from(opts.not_before + opts.validity);
        params.serial_number = Some(SerialNumber::from(serial));
        params.use_authority_key_identifier_extension = true;
        let cert = params.signed_by(&spki, &ca)?;
        let record = SignatureRecord {
            serial,
            subject_name: subject_name.to_string(),
            subject_public_key: spki_hex.clone(),
            issued_at: unix(opts.not_before),
            not_after: unix(opts.not_before + opts.validity),
            revoked: false,
            revoked_at: None,
        };
        db.records.push(record.clone());
        Ok((pem_encode("CERTIFICATE", cert.der()), record))
    })
}
