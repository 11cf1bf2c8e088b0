//! TCP/TLS streams and the HTTP plumbing shared by the services.

pub mod auth;
pub mod blocking;
pub mod http;
pub mod stream;

pub use auth::{http_auth, ClientTls, ServiceTls};
pub use blocking::BlockingStream;
pub use http::{block_on, HttpAuth, HttpClient, HttpError, HttpResponse, HttpServer, Peer};
pub use stream::{connect, Acceptor, NetStream};
