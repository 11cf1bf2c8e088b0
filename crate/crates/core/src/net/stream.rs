use std::io;
use std::pin::Pin;
use std::sync::Arc;
use std::task::{Context, Poll};

use rustls::{ClientConfig, ServerConfig};
use tokio::io::{AsyncRead, AsyncWrite, ReadBuf};
use tokio::net::{TcpListener, TcpStream};
use tokio_rustls::{TlsAcceptor, TlsConnector};

use crate::identity::{certificate_name, tls::server_name};

/// A TCP connection, optionally wrapped in TLS.
pub enum NetStream {
    Plain(TcpStream),
    ClientTls(Box<tokio_rustls::client::TlsStream<TcpStream>>),
    ServerTls(Box<tokio_rustls::server::TlsStream<TcpStream>>),
}

impl NetStream {
    /// Certified name of the remote side, when it presented a certificate.
    pub fn peer_name(&self) -> Option<String> {
        let certs = match self {
            NetStream::Plain(_) => return None,
            NetStream::ClientTls(s) => s.get_ref().1.peer_certificates(),
            NetStream::ServerTls(s) => s.get_ref().1.peer_certificates(),
        }?;
        certificate_name(certs.first()?).ok()
    }

    pub fn tcp(&self) -> &TcpStream {
        match self {
            NetStream::Plain(s) => s,
            NetStream::ClientTls(s) => s.get_ref().0,
            NetStream::ServerTls(s) => s.get_ref().0,
        }
    }
}

macro_rules! delegate {
    ($self:ident, $s:ident => $e:expr) => {
        match $self.get_mut() {
            NetStream::Plain($s) => $e,
            NetStream::ClientTls($s) => $e,
            NetStream::ServerTls($s) => $e,
        }
    };
}

impl AsyncRead for NetStream {
    fn poll_read(self: Pin<&mut Self>, cx: &mut Context<'_>, buf: &mut ReadBuf<'_>) -> Poll<io::Result<()>> {
        delegate!(self, s => Pin::new(s).poll_read(cx, buf))
    }
}

impl AsyncWrite for NetStream {
    fn poll_write(self: Pin<&mut Self>, cx: &mut Context<'_>, buf: &[u8]) -> Poll<io::Result<usize>> {
        delegate!(self, s => Pin::new(s).poll_write(cx, buf))
    }

    fn poll_write_vectored(
        self: Pin<&mut Self>,
        cx: &mut Context<'_>,
        bufs: &[io::IoSlice<'_>],
    ) -> Poll<io::Result<usize>> {
        delegate!(self, s => Pin::new(s).poll_write_vectored(cx, bufs))
    }

    fn is_write_vectored(&self) -> bool {
        match self {
            NetStream::Plain(s) => s.is_write_vectored(),
            NetStream::ClientTls(s) => s.is_write_vectored(),
            NetStream::ServerTls(s) => s.is_write_vectored(),
        }
    }

    fn poll_flush(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<io::Result<()>> {
        delegate!(self, s => Pin::new(s).poll_flush(cx))
    }

    fn poll_shutdown(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<io::Result<()>> {
        delegate!(self, s => Pin::new(s).poll_shutdown(cx))
    }
}

/// Dials `addr`, performing a TLS handshake when `tls` is set.
pub async fn connect(addr: &str, tls: Option<Arc<ClientConfig>>) -> io::Result<NetStream> {
    let tcp = TcpStream::connect(addr).await?;
    tcp.set_nodelay(true)?;
    match tls {
        None => Ok(NetStream::Plain(tcp)),
        Some(cfg) => {
            let s = TlsConnector::from(cfg).connect(server_name(), tcp).await?;
            Ok(NetStream::ClientTls(Box::new(s)))
        }
    }
}

/// Listener that optionally terminates TLS.
pub struct Acceptor {
    listener: TcpListener,
    tls: Option<TlsAcceptor>,
}

impl Acceptor {
    pub async fn bind(addr: &str, tls: Option<Arc<ServerConfig>>) -> io::Result<Self> {
        Ok(Acceptor {
            listener: TcpListener::bind(addr).await?,
            tls: tls.map(TlsAcceptor::from),
        })
    }

    pub fn local_addr(&self) -> io::Result<std::net::SocketAddr> {
        self.listener.local_addr()
    }

    pub fn is_tls(&self) -> bool {
        self.tls.is_some()
    }

    /// Accepts the next TCP connection. The TLS handshake, if any, is left to
    /// [`Handshake::finish`] so that a slow client cannot stall the accept loop.
    pub async fn accept(&self) -> io::Result<Handshake> {
        let (tcp, peer) = self.listener.accept().await?;
        tcp.set_nodelay(true)?;
        Ok(Handshake {
            tcp,
            peer,
            tls: self.tls.clone(),
        })
    }
}

pub struct Handshake {
    tcp: TcpStream,
    pub peer: std::net::SocketAddr,
    tls: Option<TlsAcceptor>,
}

impl Handshake {
    pub async fn finish(self) -> io::Result<NetStream> {
        match self.tls {
            None => Ok(NetStream::Plain(self.tcp)),
            Some(acc) => Ok(NetStream::ServerTls(Box::new(acc.accept(self.tcp).await?))),
        }
    }
}
