//! rustls configuration pinned to a single issuer on each side.
//!
//! Hostnames are not checked: a peer is trusted because its certificate
//! chains to the issuer pinned for that endpoint, which is what the trust
//! store provides.

use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use rustls::client::danger::{HandshakeSignatureValid, ServerCertVerified, ServerCertVerifier};
use rustls::crypto::CryptoProvider;
use rustls::pki_types::{CertificateDer, ServerName, UnixTime};
use rustls::server::danger::{ClientCertVerified, ClientCertVerifier};
use rustls::{ClientConfig, DigitallySignedStruct, DistinguishedName, ServerConfig, SignatureScheme};

use super::verify::{to_rustls, verify_handshake, verify_peer};
use super::{Identity, IdentityError, SignatureDb};

pub fn provider() -> Arc<CryptoProvider> {
    Arc::new(rustls::crypto::ring::default_provider())
}

fn system_time(now: UnixTime) -> SystemTime {
    UNIX_EPOCH + Duration::from_secs(now.as_secs())
}

fn chain_of<'a>(end_entity: &CertificateDer<'a>, intermediates: &[CertificateDer<'a>]) -> Vec<CertificateDer<'a>> {
    let mut v = Vec::with_capacity(intermediates.len() + 1);
    v.push(end_entity.clone());
    v.extend(intermediates.iter().cloned());
    v
}

/// Accepts a peer whose chain ends at `issuer`.
#[derive(Debug)]
pub struct PinnedVerifier {
    issuer: CertificateDer<'static>,
    db: Option<SignatureDb>,
    provider: Arc<CryptoProvider>,
    mandatory: bool,
}

impl PinnedVerifier {
    pub fn new(issuer: CertificateDer<'static>, db: Option<SignatureDb>) -> Self {
        PinnedVerifier {
            issuer,
            db,
            provider: provider(),
            mandatory: true,
        }
    }

    fn check(&self, end_entity: &CertificateDer<'_>, intermediates: &[CertificateDer<'_>], now: UnixTime) -> Result<(), rustls::Error> {
        verify_peer(&chain_of(end_entity, intermediates), &self.issuer, self.db.as_ref(), system_time(now))
            .map(|_| ())
            .map_err(to_rustls)
    }
}

impl ServerCertVerifier for PinnedVerifier {
    fn verify_server_cert(
        &self,
        end_entity: &CertificateDer<'_>,
        intermediates: &[CertificateDer<'_>],
        _server_name: &ServerName<'_>,
        _ocsp_response: &[u8],
        now: UnixTime,
    ) -> Result<ServerCertVerified, rustls::Error> {
        self.check(end_entity, intermediates, now)?;
        Ok(ServerCertVerified::assertion())
    }

    fn verify_tls12_signature(
        &self,
        message: &[u8],
        cert: &CertificateDer<'_>,
        dss: &DigitallySignedStruct,
    ) -> Result<HandshakeSignatureValid, rustls::Error> {
        rustls::crypto::verify_tls12_signature(message, cert, dss, &self.provider.signature_verification_algorithms)
    }

    fn verify_tls13_signature(
        &self,
        message: &[u8],
        cert: &CertificateDer<'_>,
        dss: &DigitallySignedStruct,
    ) -> Result<HandshakeSignatureValid, rustls::Error> {
        verify_handshake(message, cert, dss, &self.provider)
    }

    fn supported_verify_schemes(&self) -> Vec<SignatureScheme> {
        self.provider.signature_verification_algorithms.supported_schemes()
    }
}

impl ClientCertVerifier for PinnedVerifier {
    fn client_auth_mandatory(&self) -> bool {
        self.mandatory
    }

    fn root_hint_subjects(&self) -> &[DistinguishedName] {
        &[]
    }

    fn verify_client_cert(
        &self,
        end_entity: &CertificateDer<'_>,
        intermediates: &[CertificateDer<'_>],
        now: UnixTime,
    ) -> Result<ClientCertVerified, rustls::Error> {
        self.check(end_entity, intermediates, now)?;
        Ok(ClientCertVerified::assertion())
    }

    fn verify_tls12_signature(
        &self,
        message: &[u8],
        cert: &CertificateDer<'_>,
        dss: &DigitallySignedStruct,
    ) -> Result<HandshakeSignatureValid, rustls::Error> {
        rustls::crypto::verify_tls12_signature(message, cert, dss, &self.provider.signature_verification_algorithms)
    }

    fn verify_tls13_signature(
        &self,
        message: &[u8],
        cert: &CertificateDer<'_>,
        dss: &DigitallySignedStruct,
    ) -> Result<HandshakeSignatureValid, rustls::Error> {
        verify_handshake(message, cert, dss, &self.provider)
    }

    fn supported_verify_schemes(&self) -> Vec<SignatureScheme> {
        self.provider.signature_verification_algorithms.supported_schemes()
    }
}

fn tls_err(e: rustls::Error) -> IdentityError {
    IdentityError::Certificate(e.to_string())
}

/// Server side. With `client_issuer` set, clients must present a chain to it.
pub fn server_config(
    id: &Identity,
    client_issuer: Option<CertificateDer<'static>>,
    db: Option<SignatureDb>,
) -> Result<Arc<ServerConfig>, IdentityError> {
    let builder = ServerConfig::builder_with_provider(provider())
        .with_protocol_versions(&[&rustls::version::TLS13])
        .map_err(tls_err)?;
    let builder = match client_issuer {
        Some(issuer) => builder.with_client_cert_verifier(Arc::new(PinnedVerifier::new(issuer, db))),
        None => builder.with_no_client_auth(),
    };
    let mut cfg = builder
        .with_single_cert(id.chain(), id.private_key_der())
        .map_err(tls_err)?;
    // Relay ingest peers never expect bytes from the server; tickets would
    // look like data to their liveness probe.
    cfg.send_tls13_tickets = 0;
    Ok(Arc::new(cfg))
}

/// Client side, trusting servers that chain to `server_issuer`.
pub fn client_config(
    id: Option<&Identity>,
    server_issuer: CertificateDer<'static>,
) -> Result<Arc<ClientConfig>, IdentityError> {
    let builder = ClientConfig::builder_with_provider(provider())
        .with_protocol_versions(&[&rustls::version::TLS13])
        .map_err(tls_err)?
        .dangerous()
        .with_custom_certificate_verifier(Arc::new(PinnedVerifier::new(server_issuer, None)));
    let cfg = match id {
        Some(id) => builder
            .with_client_auth_cert(id.chain(), id.private_key_der())
            .map_err(tls_err)?,
        None => builder.with_no_client_auth(),
    };
    Ok(Arc::new(cfg))
}

/// Name used for SNI; certificates are matched by issuer, not by host.
pub fn server_name() -> ServerName<'static> {
    ServerName::try_from("detstream.internal").expect("static name is valid")
}
