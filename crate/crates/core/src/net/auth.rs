use std::path::PathBuf;
use std::sync::Arc;

use rustls::ClientConfig;
use serde::{Deserialize, Serialize};

use super::HttpAuth;
use crate::identity::tls::{client_config, server_config};
use crate::identity::{load_cert_file, Identity, IdentityError, SignatureDb};

/// TLS settings of an HTTPS service.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceTls {
    /// Directory holding the service identity.
    pub identity: PathBuf,
    /// Issuer certificate that clients must chain to.
    pub client_issuer: PathBuf,
    #[serde(default)]
    pub signature_db: Option<PathBuf>,
    /// Trust this header for the user name; set when behind a reverse proxy.
    #[serde(default)]
    pub proxy_header: Option<String>,
}

impl ServiceTls {
    pub fn http_auth(&self) -> Result<HttpAuth, IdentityError> {
        let id = Identity::load(&self.identity)?;
        let issuer = load_cert_file(&self.client_issuer)?;
        let cfg = server_config(&id, Some(issuer), self.signature_db.as_ref().map(SignatureDb::open))?;
        Ok(match &self.proxy_header {
            Some(h) => HttpAuth::ProxyHeader {
                tls: cfg,
                header: h.clone(),
            },
            None => HttpAuth::MutualTls(cfg),
        })
    }
}

/// Plain HTTP when no TLS section is configured.
pub fn http_auth(tls: Option<&ServiceTls>) -> Result<HttpAuth, IdentityError> {
    tls.map_or(Ok(HttpAuth::None), ServiceTls::http_auth)
}

/// TLS settings of a client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientTls {
    pub identity: PathBuf,
    /// Issuer certificate the server must chain to.
    pub server_issuer: PathBuf,
}

impl ClientTls {
    pub fn client_config(&self) -> Result<Arc<ClientConfig>, IdentityError> {
        let id = Identity::load(&self.identity)?;
        client_config(Some(&id), load_cert_file(&self.server_issuer)?)
    }
}
