//! Minimal blocking client for the `/session` protocol, used by tests and
//! scripted tooling.

use std::io::ErrorKind;
use std::net::{SocketAddr, TcpStream};
use std::time::{Duration, Instant};

use tungstenite::{Error as WsError, Message, WebSocket};

use crate::protocol::{ClientBody, ClientFrame, Role, ServerBody, ServerFrame, ENDPOINT, PROTOCOL};

pub struct SessionClient {
    ws: WebSocket<TcpStream>,
    pub session: String,
    pub role: Option<Role>,
    seq: u64,
    heartbeat: Duration,
    last_sent: Instant,
    /// Every frame received so far, in arrival order.
    pub log: Vec<ServerFrame>,
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("connect: {0}")]
    Connect(String),
    #[error("websocket: {0}")]
    Ws(Box<WsError>),
    #[error("bad frame from server: {0}")]
    Frame(String),
    #[error("timed out waiting for {0}")]
    Timeout(String),
}

impl From<WsError> for ClientError {
    fn from(e: WsError) -> Self {
        ClientError::Ws(Box::new(e))
    }
}

impl SessionClient {
    /// Opens the socket without sending anything.
    pub fn open(addr: SocketAddr) -> Result<Self, ClientError> {
        let stream = TcpStream::connect(addr).map_err(|e| ClientError::Connect(e.to_string()))?;
        let (ws, _) = tungstenite::client(format!("ws://{addr}{ENDPOINT}"), stream)
            .map_err(|e| ClientError::Connect(e.to_string()))?;
        ws.get_ref().set_read_timeout(Some(Duration::from_millis(10))).map_err(|e| ClientError::Connect(e.to_string()))?;
        Ok(Self {
            ws,
            session: String::new(),
            role: None,
            seq: 0,
            heartbeat: Duration::from_secs(1),
            last_sent: Instant::now(),
            log: Vec::new(),
        })
    }

    /// Connects and completes the hello exchange. `session` empty opens a
    /// new session.
    pub fn connect(addr: SocketAddr, session: &str, role: Option<Role>) -> Result<Self, ClientError> {
        let mut c = Self::open(addr)?;
        c.session = session.to_string();
        c.send(ClientBody::Hello { protocol: Some(PROTOCOL.into()), role })?;
        let hello = c.wait_for(Duration::from_secs(5), |b| matches!(b, ServerBody::Hello { .. } | ServerBody::Reject { .. }))?;
        match hello.body {
            ServerBody::Hello { role, heartbeat_ms, .. } => {
                c.session = hello.session;
                c.role = Some(role);
                c.heartbeat = Duration::from_millis(heartbeat_ms.max(1) / 2);
                Ok(c)
            }
            ServerBody::Reject { reason, .. } => Err(ClientError::Connect(reason)),
            _ => unreachable!(),
        }
    }

    /// Sends a frame and returns its sequence number.
    pub fn send(&mut self, body: ClientBody) -> Result<u64, ClientError> {
        self.seq += 1;
        let f = ClientFrame { session: self.session.clone(), seq: self.seq, body };
        self.send_text(&f.to_text())?;
        Ok(self.seq)
    }

    pub fn send_text(&mut self, text: &str) -> Result<(), ClientError> {
        self.ws.send(Message::text(text.to_string()))?;
        self.last_sent = Instant::now();
        Ok(())
    }

    /// Next frame within `timeout`, keeping the connection alive meanwhile.
    pub fn recv(&mut self, timeout: Duration) -> Result<Option<ServerFrame>, ClientError> {
        let end = Instant::now() + timeout;
        loop {
            if self.last_sent.elapsed() >= self.heartbeat {
                self.send(ClientBody::Heartbeat {})?;
            }
            match self.ws.read() {
                Ok(Message::Text(t)) => {
                    let f = ServerFrame::parse(t.as_str()).map_err(|e| ClientError::Frame(format!("{e}: {t}")))?;
                    self.log.push(f.clone());
                    return Ok(Some(f));
                }
                Ok(Message::Close(_)) => return Err(WsError::ConnectionClosed.into()),
                Ok(_) => {}
                Err(WsError::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
                Err(e) => return Err(e.into()),
            }
            if Instant::now() >= end {
                return Ok(None);
            }
        }
    }

    /// Reads until a frame satisfies `pred`.
    pub fn wait_for(
        &mut self,
        timeout: Duration,
        mut pred: impl FnMut(&ServerBody) -> bool,
    ) -> Result<ServerFrame, ClientError> {
        let end = Instant::now() + timeout;
        loop {
            let left = end.saturating_duration_since(Instant::now());
            match self.recv(left)? {
                Some(f) if pred(&f.body) => return Ok(f),
                Some(_) => {}
                None => return Err(ClientError::Timeout(format!("frame after {timeout:?}"))),
            }
        }
    }

    pub fn close(mut self) {
        let _ = self.ws.close(None);
        let _ = self.ws.flush();
    }
}
