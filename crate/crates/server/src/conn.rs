//! One worker per client connection. Reads poll with a short timeout so
//! the same thread can flush queued frames and send heartbeats.

use std::io::ErrorKind;
use std::net::{SocketAddr, TcpStream};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::time::{Duration, Instant};

use tungstenite::handshake::server::{ErrorResponse, Request, Response};
use tungstenite::http::StatusCode;
use tungstenite::{Error as WsError, Message, WebSocket};

use crate::protocol::{ClientBody, ClientFrame, Role, ServerBody, ServerFrame, ENDPOINT, PROTOCOL};
use crate::session::{Hub, Session};

const POLL: Duration = Duration::from_millis(20);

fn check_path(req: &Request, resp: Response) -> Result<Response, ErrorResponse> {
    if req.uri().path() == ENDPOINT {
        Ok(resp)
    } else {
        let mut err = ErrorResponse::new(Some(format!("no such endpoint; connect to {ENDPOINT}")));
        *err.status_mut() = StatusCode::NOT_FOUND;
        Err(err)
    }
}

struct Conn {
    hub: Arc<Hub>,
    id: u64,
    tx: Sender<String>,
    session: Option<(Arc<Session>, Role)>,
}

impl Conn {
    fn reply(&self, body: ServerBody) {
        match &self.session {
            Some((s, _)) => s.send_to(&self.hub, self.id, body),
            None => {
                let f = ServerFrame { session: String::new(), seq: self.hub.next_seq(), body };
                let _ = self.tx.send(f.to_text());
            }
        }
    }

    fn reject(&self, ref_seq: Option<u64>, reason: impl Into<String>) {
        self.reply(ServerBody::Reject { ref_seq, reason: reason.into() });
    }

    fn handle(&mut self, text: &str) {
        let frame = match ClientFrame::parse(text) {
            Ok(f) => f,
            Err(e) => return self.reject(None, format!("malformed frame: {e}")),
        };
        let seq = frame.seq;
        match (frame.body, &self.session) {
            (ClientBody::Hello { protocol, role }, None) => {
                if let Some(p) = protocol.filter(|p| p != PROTOCOL) {
                    return self.reject(Some(seq), format!("unsupported protocol `{p}`; server speaks {PROTOCOL}"));
                }
                let session = if frame.session.is_empty() {
                    self.hub.create_session()
                } else {
                    match self.hub.session(&frame.session) {
                        Some(s) => s,
                        None => return self.reject(Some(seq), format!("unknown session `{}`", frame.session)),
                    }
                };
                let role = session.join(&self.hub, self.id, self.tx.clone(), role);
                log::info!("client {} joined session {} as {:?}", self.id, session.id, role);
                self.session = Some((session, role));
            }
            (ClientBody::Hello { .. }, Some(_)) => self.reject(Some(seq), "already joined a session"),
            (ClientBody::Heartbeat {}, _) => {}
            (_, None) => self.reject(Some(seq), "send hello first"),
            (_, Some((s, _))) if frame.session != s.id => {
                self.reject(Some(seq), format!("frame names session `{}` but this connection joined `{}`", frame.session, s.id))
            }
            (ClientBody::Start { task, seed, setting }, Some((s, _))) => {
                s.handle_start(&self.hub, self.id, seq, &task, seed, setting.as_deref())
            }
            (ClientBody::Action { command, turn }, Some((s, _))) => s.handle_action(&self.hub, self.id, seq, &command, turn),
            (ClientBody::Abort { reason }, Some((s, _))) => s.handle_abort(&self.hub, self.id, seq, reason),
        }
    }

    fn heartbeat(&self) {
        match &self.session {
            Some((s, _)) => s.send_to(&self.hub, self.id, ServerBody::Heartbeat { turn_state: s.turn_state() }),
            None => self.reply(ServerBody::Heartbeat { turn_state: crate::protocol::TurnState::Idle }),
        }
    }
}

fn flush(ws: &mut WebSocket<TcpStream>, rx: &Receiver<String>) -> Result<(), WsError> {
    let mut wrote = false;
    while let Ok(text) = rx.try_recv() {
        ws.write(Message::text(text))?;
        wrote = true;
    }
    if wrote {
        ws.flush()?;
    }
    Ok(())
}

pub(crate) fn serve_connection(hub: Arc<Hub>, stream: TcpStream, peer: SocketAddr) {
    let _ = stream.set_nonblocking(false);
    let mut ws = match tungstenite::accept_hdr(stream, check_path) {
        Ok(ws) => ws,
        Err(e) => {
            log::debug!("handshake with {peer} failed: {e}");
            return;
        }
    };
    if ws.get_ref().set_read_timeout(Some(POLL)).is_err() {
        return;
    }
    let (tx, rx) = mpsc::channel();
    let mut conn = Conn { id: hub.client_id(), hub: hub.clone(), tx, session: None };
    let hb = hub.cfg.heartbeat;
    let dead_after = hb * hub.cfg.heartbeat_misses.max(1);
    let mut last_in = Instant::now();
    let mut last_hb = Instant::now();
    loop {
        if hub.stopped() {
            let _ = flush(&mut ws, &rx);
            let _ = ws.close(None);
            let _ = ws.flush();
            break;
        }
        if flush(&mut ws, &rx).is_err() {
            break;
        }
        let now = Instant::now();
        if now.duration_since(last_hb) >= hb {
            conn.heartbeat();
            last_hb = now;
        }
        if now.duration_since(last_in) > dead_after {
            log::info!("client {} ({peer}) missed {} heartbeats; dropping", conn.id, hub.cfg.heartbeat_misses);
            break;
        }
        match ws.read() {
            Ok(Message::Text(t)) => {
                last_in = Instant::now();
                conn.handle(t.as_str());
            }
            Ok(Message::Binary(_)) => {
                last_in = Instant::now();
                conn.reject(None, "binary frames are not supported; send JSON text");
            }
            Ok(Message::Close(_)) => {
                let _ = ws.flush();
                break;
            }
            Ok(_) => last_in = Instant::now(),
            Err(WsError::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(e) => {
                log::debug!("client {} ({peer}): {e}", conn.id);
                break;
            }
        }
    }
    if let Some((s, _)) = &conn.session {
        s.leave(conn.id);
    }
}
