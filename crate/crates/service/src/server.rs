//! TCP front end: one task and one engine session per connection.

use std::io;
use std::net::SocketAddr;
use std::sync::Arc;

use futures_util::{SinkExt, StreamExt};
use miditune::engine::{CorrectionConfig, EngineError, LatencyClock};
use miditune::neural::LstmModel;
use thiserror::Error;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream, ToSocketAddrs};
use tokio_tungstenite::tungstenite::Message;

use crate::connection::Connection;
use crate::protocol::{ErrorCode, ServerMessage};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transport {
    /// One JSON object per WebSocket text frame.
    WebSocket,
    /// One JSON object per line on a plain TCP socket.
    Ndjson,
}

#[derive(Debug, Clone)]
pub struct ServerOptions {
    pub defaults: CorrectionConfig,
    pub clock: LatencyClock,
    pub transport: Transport,
}

impl Default for ServerOptions {
    fn default() -> Self {
        ServerOptions { defaults: CorrectionConfig::default(), clock: LatencyClock::Measured, transport: Transport::WebSocket }
    }
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("cannot listen: {0}")]
    Bind(#[source] io::Error),
    #[error("default session configuration rejected: {0}")]
    Defaults(#[from] EngineError),
}

pub struct Server {
    listener: TcpListener,
    model: Option<Arc<LstmModel>>,
    opts: ServerOptions,
}

impl Server {
    /// Binds the listener after checking that sessions can be created with
    /// the given model and defaults.
    pub async fn bind(addr: impl ToSocketAddrs, model: Option<Arc<LstmModel>>, opts: ServerOptions) -> Result<Self, ServiceError> {
        Connection::new(model.clone(), opts.defaults, opts.clock)?;
        let listener = TcpListener::bind(addr).await.map_err(ServiceError::Bind)?;
        Ok(Server { listener, model, opts })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Accepts connections until the listener fails.
    pub async fn run(self) -> io::Result<()> {
        loop {
            let (stream, _) = self.listener.accept().await?;
            let conn = Connection::new(self.model.clone(), self.opts.defaults, self.opts.clock)
                .expect("defaults were validated at bind time");
            let transport = self.opts.transport;
            tokio::spawn(async move {
                let _ = stream.set_nodelay(true);
                // A failing connection only ends its own task.
                match transport {
                    Transport::WebSocket => {
                        let _ = serve_websocket(stream, conn).await;
                    }
                    Transport::Ndjson => {
                        let _ = serve_ndjson(stream, conn).await;
                    }
                }
            });
        }
    }
}

async fn serve_websocket(stream: TcpStream, mut conn: Connection) -> Result<(), tokio_tungstenite::tungstenite::Error> {
    let mut ws = tokio_tungstenite::accept_async(stream).await?;
    while let Some(msg) = ws.next().await {
        let replies = match msg? {
            Message::Text(text) => conn.handle_text(&text),
            Message::Binary(_) => vec![ServerMessage::error(ErrorCode::BadMessage, "binary frames are not supported").to_json()],
            Message::Close(_) => break,
            _ => continue,
        };
        for reply in replies {
            ws.feed(Message::Text(reply)).await?;
        }
        ws.flush().await?;
    }
    Ok(())
}

async fn serve_ndjson(stream: TcpStream, mut conn: Connection) -> io::Result<()> {
    let (read, mut write) = stream.into_split();
    let mut lines = BufReader::new(read).lines();
    while let Some(line) = lines.next_line().await? {
        if line.trim().is_empty() {
            continue;
        }
        let mut out = String::new();
        for reply in conn.handle_text(&line) {
            out.push_str(&reply);
            out.push('\n');
        }
        if !out.is_empty() {
            write.write_all(out.as_bytes()).await?;
        }
    }
    Ok(())
}
