//! WebSocket session service for the human expert. A browser (or any
//! client speaking the `/session` protocol) watches episodes and answers
//! expert turns; the episode loop blocks only while a turn is open.

pub mod client;
mod conn;
pub mod protocol;
pub mod session;

use std::net::{SocketAddr, TcpListener};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use thiserror::Error;

pub use client::SessionClient;
pub use protocol::{ClientBody, ClientFrame, Role, Scene, ServerBody, ServerFrame, TurnState, ENDPOINT, PROTOCOL};
pub use session::{Hub, ServerConfig, Session, SessionLink};

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("cannot listen on {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Bound listener; nothing is accepted until [`Server::spawn`] or
/// [`Server::run`].
pub struct Server {
    listener: TcpListener,
    hub: Arc<Hub>,
}

impl Server {
    pub fn bind(hub: Arc<Hub>) -> Result<Self, ServerError> {
        let addr = hub.cfg.addr.clone();
        let listener = TcpListener::bind(&addr).map_err(|source| ServerError::Bind { addr, source })?;
        listener.set_nonblocking(true)?;
        Ok(Self { listener, hub })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, ServerError> {
        Ok(self.listener.local_addr()?)
    }

    pub fn hub(&self) -> &Arc<Hub> {
        &self.hub
    }

    /// Accepts connections until the hub is shut down.
    pub fn run(self) {
        while !self.hub.stopped() {
            match self.listener.accept() {
                Ok((stream, peer)) => {
                    let hub = self.hub.clone();
                    thread::spawn(move || conn::serve_connection(hub, stream, peer));
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(10)),
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    thread::sleep(Duration::from_millis(10));
                }
            }
        }
    }

    pub fn spawn(self) -> Result<ServerHandle, ServerError> {
        let addr = self.local_addr()?;
        let hub = self.hub.clone();
        let join = thread::spawn(move || self.run());
        Ok(ServerHandle { addr, hub, join: Some(join) })
    }
}

/// Running server; shuts down on drop.
pub struct ServerHandle {
    pub addr: SocketAddr,
    pub hub: Arc<Hub>,
    join: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn url(&self) -> String {
        format!("ws://{}{}", self.addr, ENDPOINT)
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.hub.shutdown();
        if let Some(j) = self.join.take() {
            let _ = j.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}
