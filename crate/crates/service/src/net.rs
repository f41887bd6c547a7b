//! Async side of the wire protocol: one request frame in, at most one reply
//! frame out, then the connection closes.

use std::future::Future;
use std::io;
use std::sync::Arc;

use navhop_client::wire::{self, MAX_FRAME};
use navhop_core::kvdoc::KvDoc;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};

pub async fn read_frame(stream: &mut TcpStream) -> io::Result<Vec<u8>> {
    let len = stream.read_u32().await?;
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame of {len} bytes")));
    }
    let mut body = vec![0; len as usize];
    stream.read_exact(&mut body).await?;
    Ok(body)
}

pub async fn write_reply(stream: &mut TcpStream, reply: &KvDoc) -> io::Result<()> {
    stream.write_all(&wire::encode_frame(reply.encode().as_bytes())?).await?;
    stream.flush().await
}

/// Accepts connections forever, answering each request with `handler`.
/// A handler returning `None` closes the connection without a reply.
pub async fn serve<H, F>(listener: TcpListener, handler: Arc<H>)
where
    H: Fn(KvDoc) -> F + Send + Sync + 'static,
    F: Future<Output = Option<KvDoc>> + Send + 'static,
{
    loop {
        let (mut stream, peer) = match listener.accept().await {
            Ok(c) => c,
            Err(e) => {
                tracing::warn!(error = %e, "accept failed");
                continue;
            }
        };
        let handler = handler.clone();
        tokio::spawn(async move {
            stream.set_nodelay(true).ok();
            let reply = match read_frame(&mut stream).await {
                Err(e) => {
                    tracing::debug!(%peer, error = %e, "unreadable request");
                    return;
                }
                Ok(body) => match KvDoc::decode(&body) {
                    Err(e) => Some(wire::error("BadRequest", e)),
                    Ok(req) => handler(req).await,
                },
            };
            if let Some(reply) = reply {
                if let Err(e) = write_reply(&mut stream, &reply).await {
                    tracing::debug!(%peer, error = %e, "reply not delivered");
                }
            }
        });
    }
}

/// Announces the bound address on stdout so a parent process can find it.
pub fn announce(addr: &std::net::SocketAddr) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "listening {addr}");
    let _ = out.flush();
}

pub fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_env("NAVHOP_LOG")
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn"));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}
