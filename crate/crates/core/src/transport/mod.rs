//! RPC substrate.
//!
//! Two interchangeable backends implement [`Transport`]: an in-process
//! one for protocol tests (seeded delivery shuffling, fault injection)
//! and a TCP one for real deployments. Protocol-level behavior must not
//! depend on which backend carries the frames.

mod inproc;
mod tcp;

pub use inproc::InprocTransport;
pub use tcp::TcpTransport;

use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use crate::wire::ServiceError;

/// Default per-call timeout.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(5);

/// Network identity of one service: host and port. The in-process
/// backend uses the pair purely as a name.
#[derive(Clone, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub struct Endpoint {
    pub host: String,
    pub port: u16,
}

impl Endpoint {
    pub fn new(host: String, port: u16) -> Self {
        Endpoint { host, port }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let (host, port) = s.rsplit_once(':')?;
        Some(Endpoint { host: host.to_string(), port: port.parse().ok()? })
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.host, self.port)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    #[error("call timed out")]
    Timeout,
    #[error("connection refused")]
    ConnectionRefused,
    #[error("address in use")]
    AddressInUse,
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("connection closed")]
    Closed,
    #[error("i/o error: {0}")]
    Io(String),
}

/// A failed call: either the transport broke or the service answered
/// with an error frame.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RpcError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Service(#[from] ServiceError),
}

/// Server-side request dispatcher. Invoked concurrently; a call may
/// block (the versioning manager parks completion requests), so every
/// request gets its own thread of control.
pub trait Handler: Send + Sync {
    fn handle(&self, opcode: u8, payload: &[u8]) -> Result<Vec<u8>, ServiceError>;
}

/// A running server. Dropping the handle shuts the server down,
/// draining in-flight requests.
pub struct ServerHandle {
    endpoint: Endpoint,
    control: Option<Box<dyn ServerControl>>,
}

pub(crate) trait ServerControl: Send + Sync {
    fn shutdown(&mut self);
}

impl ServerHandle {
    pub(crate) fn new(endpoint: Endpoint, control: Box<dyn ServerControl>) -> Self {
        ServerHandle { endpoint, control: Some(control) }
    }

    /// The endpoint the server actually bound (resolves port 0).
    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    pub fn shutdown(mut self) {
        if let Some(mut control) = self.control.take() {
            control.shutdown();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(mut control) = self.control.take() {
            control.shutdown();
        }
    }
}

pub trait Transport: Send + Sync {
    /// Issues one request and waits for the matching response.
    fn call(
        &self,
        endpoint: &Endpoint,
        opcode: u8,
        payload: &[u8],
        timeout: Duration,
    ) -> Result<Vec<u8>, RpcError>;

    /// Starts serving `handler` at `endpoint`.
    fn serve(&self, endpoint: &Endpoint, handler: Arc<dyn Handler>)
        -> Result<ServerHandle, TransportError>;
}

/// Convenience for the common case.
pub fn call_default(
    transport: &dyn Transport,
    endpoint: &Endpoint,
    opcode: u8,
    payload: &[u8],
) -> Result<Vec<u8>, RpcError> {
    transport.call(endpoint, opcode, payload, DEFAULT_TIMEOUT)
}
