//! Small HTTP/1.1 server and client used by every service.

use std::convert::Infallible;
use std::io;
use std::net::SocketAddr;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use axum::Router;
use bytes::Bytes;
use http_body_util::{BodyExt, Full};
use hyper::body::Incoming;
use hyper::header::{HeaderMap, HeaderValue, CONTENT_TYPE, HOST};
use hyper::{Method, Request, Uri};
use hyper_util::rt::TokioIo;
use rustls::{ClientConfig, ServerConfig};
use thiserror::Error;
use tokio::task::JoinHandle;
use tokio_util::sync::CancellationToken;
use tower::ServiceExt;

use super::stream::{connect, Acceptor};
use crate::identity::verify::io_cause;
use crate::identity::{AccessLog, AccessRecord};

/// Authenticated peer name attached to every request; empty when anonymous.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Peer(pub String);

/// How a server learns who is calling.
#[derive(Clone)]
pub enum HttpAuth {
    /// Plain HTTP, no identity.
    None,
    /// Clients present certificates verified by the server config.
    MutualTls(Arc<ServerConfig>),
    /// A reverse proxy, itself authenticated by mutual TLS, names the user
    /// in `header`. Requests without the header are attributed to the proxy.
    ProxyHeader { tls: Arc<ServerConfig>, header: String },
}

impl HttpAuth {
    fn tls(&self) -> Option<Arc<ServerConfig>> {
        match self {
            HttpAuth::None => None,
            HttpAuth::MutualTls(c) => Some(c.clone()),
            HttpAuth::ProxyHeader { tls, .. } => Some(tls.clone()),
        }
    }
}

/// A running HTTP server.
pub struct HttpServer {
    addr: SocketAddr,
    token: CancellationToken,
    task: JoinHandle<()>,
}

const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);

impl HttpServer {
    pub async fn bind(addr: &str, router: Router, auth: HttpAuth, log: AccessLog) -> io::Result<Self> {
        let acceptor = Acceptor::bind(addr, auth.tls()).await?;
        let local = acceptor.local_addr()?;
        let token = CancellationToken::new();
        let child = token.clone();
        let proxy_header = match &auth {
            HttpAuth::ProxyHeader { header, .. } => Some(header.to_ascii_lowercase()),
            _ => None,
        };
        let task = tokio::spawn(async move {
            let mut conns = tokio::task::JoinSet::new();
            loop {
                let hs = tokio::select! {
                    _ = child.cancelled() => break,
                    r = acceptor.accept() => match r {
                        Ok(hs) => hs,
                        Err(_) => continue,
                    },
                    Some(_) = conns.join_next(), if !conns.is_empty() => continue,
                };
                let router = router.clone();
                let log = log.clone();
                let proxy_header = proxy_header.clone();
                conns.spawn(async move {
                    let stream = match tokio::time::timeout(HANDSHAKE_TIMEOUT, hs.finish()).await {
                        Ok(Ok(s)) => s,
                        Ok(Err(e)) => {
                            let cause = io_cause(&e).map(str::to_string).unwrap_or_else(|| e.to_string());
                            log.record(&AccessRecord::new("", "-", "-", 401).with_error(cause));
                            return;
                        }
                        Err(_) => return,
                    };
                    let tls_name = stream.peer_name();
                    let svc = hyper::service::service_fn(move |mut req: Request<Incoming>| {
                        let from_proxy = proxy_header
                            .as_deref()
                            .and_then(|h| req.headers().get(h))
                            .and_then(|v| v.to_str().ok())
                            .map(str::to_string);
                        let peer = from_proxy.or_else(|| tls_name.clone()).unwrap_or_default();
                        req.extensions_mut().insert(Peer(peer.clone()));
                        let method = req.method().to_string();
                        let path = req.uri().path().to_string();
                        let router = router.clone();
                        let log = log.clone();
                        async move {
                            let resp = router.oneshot(req).await.unwrap_or_else(|e: Infallible| match e {});
                            log.record(&AccessRecord::new(&peer, &method, &path, resp.status().as_u16()));
                            Ok::<_, Infallible>(resp)
                        }
                    });
                    let _ = hyper::server::conn::http1::Builder::new()
                        .serve_connection(TokioIo::new(stream), svc)
                        .await;
                });
            }
        });
        Ok(HttpServer { addr: local, token, task })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub async fn shutdown(self) {
        self.token.cancel();
        let _ = self.task.await;
    }

    /// Runs until the server task ends (it only ends on shutdown).
    pub async fn wait(self) {
        let _ = self.task.await;
    }
}

#[derive(Debug, Error)]
pub enum HttpError {
    #[error("bad URL {0:?}")]
    BadUrl(String),
    #[error("https URL needs a TLS client configuration")]
    TlsRequired,
    #[error("connection failed: {0}")]
    Connect(io::Error),
    #[error("http error: {0}")]
    Http(#[from] hyper::Error),
    #[error("request timed out")]
    Timeout,
}

impl HttpError {
    /// TLS rejection cause, when the failure was a refused handshake.
    pub fn tls_cause(&self) -> Option<&'static str> {
        match self {
            HttpError::Connect(e) => io_cause(e),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HttpResponse {
    pub status: u16,
    pub headers: HeaderMap,
    pub body: Bytes,
}

impl HttpResponse {
    pub fn json<T: serde::de::DeserializeOwned>(&self) -> serde_json::Result<T> {
        serde_json::from_slice(&self.body)
    }

    pub fn text(&self) -> String {
        String::from_utf8_lossy(&self.body).into_owned()
    }

    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }
}

/// One-request-per-connection HTTP client.
#[derive(Clone)]
pub struct HttpClient {
    tls: Option<Arc<ClientConfig>>,
    timeout: Duration,
}

impl Default for HttpClient {
    fn default() -> Self {
        Self::plain()
    }
}

impl HttpClient {
    pub fn plain() -> Self {
        HttpClient {
            tls: None,
            timeout: Duration::from_secs(30),
        }
    }

    pub fn with_tls(cfg: Arc<ClientConfig>) -> Self {
        HttpClient {
            tls: Some(cfg),
            timeout: Duration::from_secs(30),
        }
    }

    pub fn timeout(mut self, t: Duration) -> Self {
        self.timeout = t;
        self
    }

    pub async fn request(
        &self,
        method: Method,
        url: &str,
        headers: &[(&str, &str)],
        body: Option<Vec<u8>>,
    ) -> Result<HttpResponse, HttpError> {
        tokio::time::timeout(self.timeout, self.request_inner(method, url, headers, body))
            .await
            .map_err(|_| HttpError::Timeout)?
    }

    async fn request_inner(
        &self,
        method: Method,
        url: &str,
        headers: &[(&str, &str)],
        body: Option<Vec<u8>>,
    ) -> Result<HttpResponse, HttpError> {
        let uri = Uri::from_str(url).map_err(|_| HttpError::BadUrl(url.to_string()))?;
        let https = match uri.scheme_str() {
            Some("https") => true,
            Some("http") | None => false,
            Some(_) => return Err(HttpError::BadUrl(url.to_string())),
        };
        let auth = uri.authority().ok_or_else(|| HttpError::BadUrl(url.to_string()))?;
        let port = auth.port_u16().unwrap_or(if https { 443 } else { 80 });
        let addr = format!("{}:{port}", auth.host());
        let tls = match (https, &self.tls) {
            (true, Some(c)) => Some(c.clone()),
            (true, None) => return Err(HttpError::TlsRequired),
            (false, _) => None,
        };
        let stream = connect(&addr, tls).await.map_err(HttpError::Connect)?;
        let (mut sender, conn) = hyper::client::conn::http1::handshake(TokioIo::new(stream)).await?;
        tokio::spawn(conn);
        let path = uri.path_and_query().map(|p| p.as_str()).unwrap_or("/");
        let mut req = Request::builder().method(method).uri(path);
        let h = req.headers_mut().expect("builder is valid");
        h.insert(HOST, HeaderValue::from_str(auth.as_str()).map_err(|_| HttpError::BadUrl(url.to_string()))?);
        for (k, v) in headers {
            let name = hyper::header::HeaderName::from_str(k).map_err(|_| HttpError::BadUrl(k.to_string()))?;
            let value = HeaderValue::from_str(v).map_err(|_| HttpError::BadUrl(v.to_string()))?;
            h.insert(name, value);
        }
        let req = req
            .body(Full::new(Bytes::from(body.unwrap_or_default())))
            .map_err(|_| HttpError::BadUrl(url.to_string()))?;
        let resp = sender.send_request(req).await?;
        let status = resp.status().as_u16();
        let headers = resp.headers().clone();
        let body = resp.into_body().collect().await?.to_bytes();
        Ok(HttpResponse { status, headers, body })
    }

    pub async fn get(&self, url: &str) -> Result<HttpResponse, HttpError> {
        self.request(Method::GET, url, &[], None).await
    }

    pub async fn delete(&self, url: &str) -> Result<HttpResponse, HttpError> {
        self.request(Method::DELETE, url, &[], None).await
    }

    pub async fn post_json(&self, url: &str, body: &impl serde::Serialize) -> Result<HttpResponse, HttpError> {
        let bytes = serde_json::to_vec(body).expect("serialisable body");
        self.request(Method::POST, url, &[(CONTENT_TYPE.as_str(), "application/json")], Some(bytes))
            .await
    }
}

/// Runs a future on a fresh single-threaded runtime; for synchronous callers.
pub fn block_on<F: std::future::Future>(f: F) -> F::Output {
    tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .expect("tokio runtime")
        .block_on(f)
}
