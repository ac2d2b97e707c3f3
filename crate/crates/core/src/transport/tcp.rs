//! TCP backend.
//!
//! One connection per (transport, endpoint), multiplexing any number of
//! outstanding calls by request id: a reader thread demultiplexes
//! responses to per-call channels, so calls from many threads share the
//! socket without ordering constraints. Servers dispatch every request
//! frame to its own worker thread; a handler that blocks (completion
//! requests park in the versioning manager) holds up nobody else.

use std::collections::HashMap;
use std::io::{ErrorKind, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{mpsc, Arc};
use std::time::Duration;

use parking_lot::{Condvar, Mutex};

use super::{Endpoint, Handler, RpcError, ServerControl, ServerHandle, Transport, TransportError};
use crate::wire::{self, decode_frame, encode_frame, encode_response, Frame};

fn io_error(err: std::io::Error) -> TransportError {
    match err.kind() {
        ErrorKind::ConnectionRefused => TransportError::ConnectionRefused,
        ErrorKind::AddrInUse => TransportError::AddressInUse,
        ErrorKind::UnexpectedEof | ErrorKind::ConnectionReset | ErrorKind::BrokenPipe => {
            TransportError::Closed
        }
        _ => TransportError::Io(err.to_string()),
    }
}

/// Reads exactly one frame, reusing the codec's validation.
fn read_frame(stream: &mut TcpStream) -> Result<Frame, TransportError> {
    let mut header = [0u8; 4];
    stream.read_exact(&mut header).map_err(io_error)?;
    let length = u32::from_be_bytes(header) as usize;
    if !(wire::FRAME_HEADER..=wire::FRAME_HEADER + wire::MAX_PAYLOAD).contains(&length) {
        return Err(TransportError::MalformedFrame(format!("frame length {length}")));
    }
    let mut whole = vec![0u8; 4 + length];
    whole[..4].copy_from_slice(&header);
    stream.read_exact(&mut whole[4..]).map_err(io_error)?;
    match decode_frame(&whole) {
        Ok(Some((frame, _))) => Ok(frame),
        Ok(None) => Err(TransportError::MalformedFrame("short frame".to_string())),
        Err(reason) => Err(TransportError::MalformedFrame(reason)),
    }
}

type PendingSender = mpsc::SyncSender<Result<Vec<u8>, TransportError>>;

struct Connection {
    writer: Mutex<TcpStream>,
    pending: Mutex<HashMap<u64, PendingSender>>,
    next_id: AtomicU64,
    dead: AtomicBool,
}

impl Connection {
    fn open(endpoint: &Endpoint) -> Result<Arc<Connection>, TransportError> {
        let stream =
            TcpStream::connect((endpoint.host.as_str(), endpoint.port)).map_err(io_error)?;
        stream.set_nodelay(true).ok();
        let mut reader = stream.try_clone().map_err(io_error)?;
        let connection = Arc::new(Connection {
            writer: Mutex::new(stream),
            pending: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            dead: AtomicBool::new(false),
        });
        let for_reader = connection.clone();
        std::thread::spawn(move || loop {
            match read_frame(&mut reader) {
                Ok(frame) => {
                    let sender = for_reader.pending.lock().remove(&frame.request_id);
                    if let Some(sender) = sender {
                        sender.send(Ok(frame.payload)).ok();
                    }
                }
                Err(error) => {
                    for_reader.fail_all(error);
                    return;
                }
            }
        });
        Ok(connection)
    }

    fn fail_all(&self, error: TransportError) {
        self.dead.store(true, Ordering::SeqCst);
        let mut pending = self.pending.lock();
        for (_, sender) in pending.drain() {
            sender.send(Err(error.clone())).ok();
        }
    }
}

/// TCP-backed [`Transport`]. Cheap to clone handles via `Arc`; keeps one
/// cached connection per destination.
#[derive(Default)]
pub struct TcpTransport {
    connections: Mutex<HashMap<Endpoint, Arc<Connection>>>,
}

impl TcpTransport {
    pub fn new() -> Self {
        TcpTransport::default()
    }

    fn connection(&self, endpoint: &Endpoint) -> Result<Arc<Connection>, TransportError> {
        let mut connections = self.connections.lock();
        if let Some(connection) = connections.get(endpoint) {
            if !connection.dead.load(Ordering::SeqCst) {
                return Ok(connection.clone());
            }
            connections.remove(endpoint);
        }
        let connection = Connection::open(endpoint)?;
        connections.insert(endpoint.clone(), connection.clone());
        Ok(connection)
    }
}

impl Transport for TcpTransport {
    fn call(
        &self,
        endpoint: &Endpoint,
        opcode: u8,
        payload: &[u8],
        timeout: Duration,
    ) -> Result<Vec<u8>, RpcError> {
        let connection = self.connection(endpoint)?;
        let request_id = connection.next_id.fetch_add(1, Ordering::Relaxed);
        let (sender, receiver) = mpsc::sync_channel(1);
        connection.pending.lock().insert(request_id, sender);

        let frame = encode_frame(opcode, request_id, payload);
        let write_result = {
            let mut writer = connection.writer.lock();
            writer.write_all(&frame).map_err(io_error)
        };
        if let Err(error) = write_result {
            connection.pending.lock().remove(&request_id);
            connection.fail_all(error.clone());
            return Err(error.into());
        }

        let raw = match receiver.recv_timeout(timeout) {
            Ok(result) => result.map_err(RpcError::Transport)?,
            Err(_) => {
                connection.pending.lock().remove(&request_id);
                return Err(TransportError::Timeout.into());
            }
        };
        wire::decode_response(&raw)
            .map_err(|reason| RpcError::Transport(TransportError::MalformedFrame(reason)))?
            .map_err(RpcError::Service)
    }

    fn serve(
        &self,
        endpoint: &Endpoint,
        handler: Arc<dyn Handler>,
    ) -> Result<ServerHandle, TransportError> {
        let listener =
            TcpListener::bind((endpoint.host.as_str(), endpoint.port)).map_err(io_error)?;
        let local = listener.local_addr().map_err(io_error)?;
        let bound = Endpoint::new(endpoint.host.clone(), local.port());

        let shared = Arc::new(ServerShared {
            shutting_down: AtomicBool::new(false),
            in_flight: Mutex::new(0),
            drained: Condvar::new(),
            streams: Mutex::new(Vec::new()),
        });

        let accept_shared = shared.clone();
        let accept_thread = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if accept_shared.shutting_down.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { break };
                stream.set_nodelay(true).ok();
                if let Ok(clone) = stream.try_clone() {
                    accept_shared.streams.lock().push(clone);
                }
                let handler = handler.clone();
                let shared = accept_shared.clone();
                std::thread::spawn(move || serve_connection(stream, handler, shared));
            }
        });

        Ok(ServerHandle::new(
            bound.clone(),
            Box::new(TcpControl { bound, shared, accept_thread: Some(accept_thread) }),
        ))
    }
}

struct ServerShared {
    shutting_down: AtomicBool,
    in_flight: Mutex<u64>,
    drained: Condvar,
    streams: Mutex<Vec<TcpStream>>,
}

fn serve_connection(stream: TcpStream, handler: Arc<dyn Handler>, shared: Arc<ServerShared>) {
    let writer = Arc::new(Mutex::new(match stream.try_clone() {
        Ok(clone) => clone,
        Err(_) => return,
    }));
    let mut reader = stream;
    loop {
        let frame = match read_frame(&mut reader) {
            Ok(frame) => frame,
            // EOF, reset or garbage: drop the connection. A response is
            // impossible without a parsable request id.
            Err(_) => return,
        };
        let handler = handler.clone();
        let writer = writer.clone();
        let shared = shared.clone();
        *shared.in_flight.lock() += 1;
        std::thread::spawn(move || {
            let result = handler.handle(frame.opcode, &frame.payload);
            let response = encode_frame(frame.opcode, frame.request_id, &encode_response(&result));
            writer.lock().write_all(&response).ok();
            let mut in_flight = shared.in_flight.lock();
            *in_flight -= 1;
            if *in_flight == 0 {
                shared.drained.notify_all();
            }
        });
    }
}

struct TcpControl {
    bound: Endpoint,
    shared: Arc<ServerShared>,
    accept_thread: Option<std::thread::JoinHandle<()>>,
}

impl ServerControl for TcpControl {
    fn shutdown(&mut self) {
        self.shared.shutting_down.store(true, Ordering::SeqCst);
        // Kick the accept loop awake so it observes the flag and exits,
        // releasing the listening port.
        TcpStream::connect((self.bound.host.as_str(), self.bound.port)).ok();
        if let Some(thread) = self.accept_thread.take() {
            thread.join().ok();
        }
        // Drain in-flight requests, then drop the connections.
        let mut in_flight = self.shared.in_flight.lock();
        while *in_flight > 0 {
            if self
                .shared
                .drained
                .wait_for(&mut in_flight, Duration::from_secs(5))
                .timed_out()
            {
                break;
            }
        }
        drop(in_flight);
        for stream in self.shared.streams.lock().drain(..) {
            stream.shutdown(std::net::Shutdown::Both).ok();
        }
    }
}
