use std::time::{SystemTime, UNIX_EPOCH};

use rustls::pki_types::CertificateDer;
use thiserror::Error;
use x509_parser::prelude::{FromDer, X509Certificate};

use super::SignatureDb;

/// Why a peer was refused. Each cause is distinct so that logs and clients
/// can tell them apart.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VerifyError {
    #[error("no certificate presented")]
    NoCertificate,
    #[error("certificate is not issued by the pinned issuer")]
    UntrustedIssuer,
    #[error("certificate expired")]
    Expired,
    #[error("certificate not yet valid")]
    NotYetValid,
    #[error("certificate revoked (serial {0})")]
    Revoked(u64),
    #[error("peer key does not match its certificate")]
    KeyMismatch,
    #[error("bad certificate signature")]
    BadSignature,
    #[error("malformed certificate: {0}")]
    Malformed(String),
}

impl VerifyError {
    /// Short machine-readable cause.
    pub fn cause(&self) -> &'static str {
        match self {
            VerifyError::NoCertificate => "no-certificate",
            VerifyError::UntrustedIssuer => "untrusted-issuer",
            VerifyError::Expired => "expired",
            VerifyError::NotYetValid => "not-yet-valid",
            VerifyError::Revoked(_) => "revoked",
            VerifyError::KeyMismatch => "key-mismatch",
            VerifyError::BadSignature => "bad-signature",
            VerifyError::Malformed(_) => "malformed",
        }
    }
}

const MAX_DEPTH: usize = 4;

fn parse(der: &[u8]) -> Result<X509Certificate<'_>, VerifyError> {
    match X509Certificate::from_der(der) {
        Ok(([], c)) => Ok(c),
        Ok(_) => Err(VerifyError::Malformed("trailing bytes".into())),
        Err(e) => Err(VerifyError::Malformed(e.to_string())),
    }
}

fn check_validity(c: &X509Certificate<'_>, now: i64) -> Result<(), VerifyError> {
    if now < c.validity().not_before.timestamp() {
        return Err(VerifyError::NotYetValid);
    }
    if now > c.validity().not_after.timestamp() {
        return Err(VerifyError::Expired);
    }
    Ok(())
}

fn signed_by(child: &X509Certificate<'_>, parent: &X509Certificate<'_>) -> bool {
    child.issuer() == parent.subject() && child.verify_signature(Some(parent.public_key())).is_ok()
}

pub(crate) fn serial_u64(c: &X509Certificate<'_>) -> Option<u64> {
    let raw = c.raw_serial();
    let start = raw.iter().position(|b| *b != 0).unwrap_or(raw.len());
    let digits = &raw[start..];
    (digits.len() <= 8).then(|| digits.iter().fold(0u64, |acc, b| (acc << 8) | *b as u64))
}

/// Checks `chain` (leaf first) against the pinned `issuer` and returns the
/// leaf's common name.
///
/// A leaf identical to the pinned certificate is accepted as is, which is how
/// self-signed service identities are trusted directly. When `db` is given,
/// a leaf whose serial and key match a revoked record is refused.
pub fn verify_peer(
    chain: &[CertificateDer<'_>],
    issuer: &CertificateDer<'_>,
    db: Option<&SignatureDb>,
    now: SystemTime,
) -> Result<String, VerifyError> {
    let leaf_der = chain.first().ok_or(VerifyError::NoCertificate)?;
    let now_s = now.duration_since(UNIX_EPOCH).map(|d| d.as_secs() as i64).unwrap_or(0);
    let anchor = parse(issuer)?;
    let leaf = parse(leaf_der)?;
    let name = leaf
        .subject()
        .iter_common_name()
        .next()
        .and_then(|cn| cn.as_str().ok())
        .ok_or_else(|| VerifyError::Malformed("no common name".into()))?
        .to_string();

    if leaf_der.as_ref() != issuer.as_ref() {
        let rest: Vec<X509Certificate<'_>> = chain[1..].iter().map(|c| parse(c)).collect::<Result<_, _>>()?;
        let mut current = &leaf;
        let mut reached = false;
        for _ in 0..MAX_DEPTH {
            if current.issuer() == anchor.subject() {
                if !signed_by(current, &anchor) {
                    return Err(VerifyError::BadSignature);
                }
                reached = true;
                break;
            }
            let Some(parent) = rest.iter().find(|p| p.subject() == current.issuer()) else {
                break;
            };
            if !signed_by(current, parent) {
                return Err(VerifyError::BadSignature);
            }
            check_validity(parent, now_s)?;
            current = parent;
        }
        if !reached {
            return Err(VerifyError::UntrustedIssuer);
        }
    }
    check_validity(&anchor, now_s)?;
    check_validity(&leaf, now_s)?;

    if let (Some(db), Some(serial)) = (db, serial_u64(&leaf)) {
        // An unreachable database does not block authentication.
        if let Ok(Some(rec)) = db.get(serial) {
            if rec.revoked && rec.subject_public_key == hex::encode(leaf.public_key().raw) {
                return Err(VerifyError::Revoked(serial));
            }
        }
    }
    Ok(name)
}

/// Verifies a TLS 1.3 handshake signature with the leaf key; failure means the
/// peer does not hold the key its certificate names.
pub(crate) fn verify_handshake(
    message: &[u8],
    cert: &CertificateDer<'_>,
    dss: &rustls::DigitallySignedStruct,
    provider: &rustls::crypto::CryptoProvider,
) -> Result<rustls::client::danger::HandshakeSignatureValid, rustls::Error> {
    rustls::crypto::verify_tls13_signature(message, cert, dss, &provider.signature_verification_algorithms)
        .map_err(|_| to_rustls(VerifyError::KeyMismatch))
}

/// Maps a cause onto the closest TLS certificate error so that the peer gets
/// a meaningful alert.
pub(crate) fn to_rustls(e: VerifyError) -> rustls::Error {
    use rustls::CertificateError as C;
    let ce = match e {
        VerifyError::NoCertificate => return rustls::Error::NoCertificatesPresented,
        VerifyError::UntrustedIssuer => C::UnknownIssuer,
        VerifyError::Expired => C::Expired,
        VerifyError::NotYetValid => C::NotValidYet,
        VerifyError::Revoked(_) => C::Revoked,
        VerifyError::KeyMismatch => C::Other(rustls::OtherError(std::sync::Arc::new(VerifyError::KeyMismatch))),
        VerifyError::BadSignature => C::BadSignature,
        VerifyError::Malformed(_) => C::BadEncoding,
    };
    rustls::Error::InvalidCertificate(ce)
}

/// Recovers a coarse cause from a TLS error, either ours or an alert from the peer.
pub fn cause_of(e: &rustls::Error) -> Option<&'static str> {
    use rustls::AlertDescription as A;
    use rustls::CertificateError as C;
    Some(match e {
        rustls::Error::NoCertificatesPresented => "no-certificate",
        rustls::Error::InvalidCertificate(C::UnknownIssuer) => "untrusted-issuer",
        rustls::Error::InvalidCertificate(C::Expired) => "expired",
        rustls::Error::InvalidCertificate(C::NotValidYet) => "not-yet-valid",
        rustls::Error::InvalidCertificate(C::Revoked) => "revoked",
        rustls::Error::InvalidCertificate(C::BadSignature) => "bad-signature",
        rustls::Error::InvalidCertificate(C::BadEncoding) => "malformed",
        rustls::Error::InvalidCertificate(C::Other(o)) => {
            return o.0.downcast_ref::<VerifyError>().map(VerifyError::cause);
        }
        rustls::Error::AlertReceived(A::UnknownCA) => "untrusted-issuer",
        rustls::Error::AlertReceived(A::CertificateExpired) => "expired",
        rustls::Error::AlertReceived(A::CertificateRevoked) => "revoked",
        rustls::Error::AlertReceived(A::DecryptError) => "bad-signature",
        rustls::Error::AlertReceived(A::BadCertificate) => "malformed",
        rustls::Error::AlertReceived(A::CertificateRequired) => "no-certificate",
        _ => return None,
    })
}

/// Digs a TLS error out of an I/O error and names its cause.
pub fn io_cause(e: &std::io::Error) -> Option<&'static str> {
    e.get_ref()?.downcast_ref::<rustls::Error>().and_then(cause_of)
}

#[cfg(test)]
mod tests {
    use std::time::Duration;

    use super::*;
    use crate::identity::signer::{sign_identity, SignOptions};
    use crate::identity::{parse_cert_pem, Identity};

    fn setup() -> (tempfile::TempDir, SignatureDb, Identity) {
        let dir = tempfile::tempdir().unwrap();
        let db = SignatureDb::open(dir.path().join("sig.json"));
        (dir, db, Identity::generate("issuer").unwrap())
    }

    #[test]
    fn signed_chain_accepted_against_its_issuer_only() {
        let (_d, db, ca) = setup();
        let other = Identity::generate("other").unwrap();
        let user = Identity::generate("tmp").unwrap();
        let (pem, _) = sign_identity(&ca, &user.public_key_pem(), "alice", &db, &SignOptions::default()).unwrap();
        let cert = parse_cert_pem(&pem).unwrap();
        let now = SystemTime::now();
        assert_eq!(verify_peer(std::slice::from_ref(&cert), ca.certificate(), Some(&db), now).unwrap(), "alice");
        assert_eq!(
            verify_peer(&[cert], other.certificate(), None, now),
            Err(VerifyError::UntrustedIssuer)
        );
    }

    #[test]
    fn self_signed_stranger_is_untrusted() {
        let ca = Identity::generate("ca").unwrap();
        let stranger = Identity::generate("mallory").unwrap();
        assert_eq!(
            verify_peer(&stranger.chain(), ca.certificate(), None, SystemTime::now()),
            Err(VerifyError::UntrustedIssuer)
        );
        // pinning the stranger directly is fine
        assert_eq!(
            verify_peer(&stranger.chain(), stranger.certificate(), None, SystemTime::now()).unwrap(),
            "mallory"
        );
    }

    #[test]
    fn clock_override_gives_expiry_and_not_yet_valid() {
        let (_d, db, ca) = setup();
        let user = Identity::generate("tmp").unwrap();
        let (pem, _) = sign_identity(&ca, &user.public_key_pem(), "bob", &db, &SignOptions::default()).unwrap();
        let cert = parse_cert_pem(&pem).unwrap();
        let later = SystemTime::now() + Duration::from_secs(91 * 24 * 3600);
        let earlier = SystemTime::now() - Duration::from_secs(3600);
        assert_eq!(verify_peer(std::slice::from_ref(&cert), ca.certificate(), None, later), Err(VerifyError::Expired));
        assert_eq!(verify_peer(&[cert], ca.certificate(), None, earlier), Err(VerifyError::NotYetValid));
    }

    #[test]
    fn revoked_never_accepted_again() {
        let (_d, db, ca) = setup();
        let user = Identity::generate("tmp").unwrap();
        let (pem, rec) = sign_identity(&ca, &user.public_key_pem(), "carol", &db, &SignOptions::default()).unwrap();
        let cert = parse_cert_pem(&pem).unwrap();
        db.revoke(rec.serial).unwrap();
        for _ in 0..3 {
            assert_eq!(
                verify_peer(std::slice::from_ref(&cert), ca.certificate(), Some(&db), SystemTime::now()),
                Err(VerifyError::Revoked(rec.serial))
            );
        }
    }

    #[test]
    fn intermediate_chain_verified() {
        let (_d, db, root) = setup();
        let mid = Identity::generate("mid").unwrap();
        // Promote `mid` to an issuer signed by root: re-sign its self-signed CA params.
        let mid_cert = {
            use rcgen::{BasicConstraints, CertificateParams, DistinguishedName, DnType, IsCa, Issuer, KeyUsagePurpose};
            let mut p = CertificateParams::default();
            let mut dn = DistinguishedName::new();
            dn.push(DnType::CommonName, "mid");
            p.distinguished_name = dn;
            p.is_ca = IsCa::Ca(BasicConstraints::Unconstrained);
            p.key_usages = vec![KeyUsagePurpose::KeyCertSign, KeyUsagePurpose::DigitalSignature];
            let issuer = Issuer::from_ca_cert_der(root.certificate(), root.key_pair()).unwrap();
            p.signed_by(mid.key_pair(), &issuer).unwrap().der().clone()
        };
        let mut mid = mid;
        mid.install_certificate(&crate::identity::pem_encode("CERTIFICATE", &mid_cert), vec![])
            .unwrap();
        let user = Identity::generate("tmp").unwrap();
        let (pem, _) = sign_identity(&mid, &user.public_key_pem(), "dave", &db, &SignOptions::default()).unwrap();
        let leaf = parse_cert_pem(&pem).unwrap();
        let now = SystemTime::now();
        assert_eq!(verify_peer(&[leaf.clone(), mid_cert.clone()], root.certificate(), None, now).unwrap(), "dave");
        assert_eq!(
            verify_peer(&[leaf], root.certificate(), None, now),
            Err(VerifyError::UntrustedIssuer)
        );
    }

    #[test]
    fn garbage_is_malformed() {
        let ca = Identity::generate("ca").unwrap();
        let junk = CertificateDer::from(vec![0x30, 0x03, 1, 2, 3]);
        assert!(matches!(
            verify_peer(&[junk], ca.certificate(), None, SystemTime::now()),
            Err(VerifyError::Malformed(_))
        ));
        assert_eq!(
            verify_peer(&[], ca.certificate(), None, SystemTime::now()),
            Err(VerifyError::NoCertificate)
        );
    }
}
