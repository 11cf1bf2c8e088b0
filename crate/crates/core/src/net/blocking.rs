use std::io::{self, Read, Write};
use std::net::TcpStream;
use std::sync::Arc;
use std::time::Duration;

use rustls::{ClientConfig, ClientConnection, StreamOwned};

use crate::identity::tls::server_name;

/// Blocking client connection, optionally over TLS.
pub enum BlockingStream {
    Plain(TcpStream),
    Tls(Box<StreamOwned<ClientConnection, TcpStream>>),
}

impl BlockingStream {
    pub fn connect(addr: &str, tls: Option<Arc<ClientConfig>>, timeout: Option<Duration>) -> io::Result<Self> {
        let tcp = match timeout {
            Some(t) => {
                let sa = std::net::ToSocketAddrs::to_socket_addrs(addr)?
                    .next()
                    .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, format!("cannot resolve {addr}")))?;
                TcpStream::connect_timeout(&sa, t)?
            }
            None => TcpStream::connect(addr)?,
        };
        tcp.set_nodelay(true)?;
        match tls {
            None => Ok(BlockingStream::Plain(tcp)),
            Some(cfg) => {
                let conn = ClientConnection::new(cfg, server_name()).map_err(io::Error::other)?;
                let mut s = StreamOwned::new(conn, tcp);
                // Drive the handshake now so that certificate errors surface here.
                while s.conn.is_handshaking() {
                    s.conn.complete_io(&mut s.sock)?;
                }
                Ok(BlockingStream::Tls(Box::new(s)))
            }
        }
    }

    pub fn tcp(&self) -> &TcpStream {
        match self {
            BlockingStream::Plain(s) => s,
            BlockingStream::Tls(s) => &s.sock,
        }
    }

    /// True when the remote end has closed or reset the connection.
    ///
    /// Only meaningful on connections where the peer never sends data.
    pub fn peer_closed(&self) -> bool {
        let tcp = self.tcp();
        if tcp.set_nonblocking(true).is_err() {
            return true;
        }
        let mut b = [0u8; 1];
        let closed = match tcp.peek(&mut b) {
            Ok(0) => true,
            Ok(_) => false,
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => false,
            Err(_) => true,
        };
        let _ = tcp.set_nonblocking(false);
        closed
    }
}

impl Read for BlockingStream {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        match self {
            BlockingStream::Plain(s) => s.read(buf),
            BlockingStream::Tls(s) => s.read(buf),
        }
    }
}

impl Write for BlockingStream {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        match self {
            BlockingStream::Plain(s) => s.write(buf),
            BlockingStream::Tls(s) => s.write(buf),
        }
    }

    fn write_vectored(&mut self, bufs: &[io::IoSlice<'_>]) -> io::Result<usize> {
        match self {
            BlockingStream::Plain(s) => s.write_vectored(bufs),
            BlockingStream::Tls(s) => s.write_vectored(bufs),
        }
    }

    fn flush(&mut self) -> io::Result<()> {
        match self {
            BlockingStream::Plain(s) => s.flush(),
            BlockingStream::Tls(s) => s.flush(),
        }
    }
}
