//! Frame format, opcode table and error codes: the system's only wire
//! contract.
//!
//! A frame is `length (4 BE) || opcode (1) || request_id (8 BE) ||
//! payload`, where `length` counts everything after itself, so
//! `length = 9 + payload length`. Responses reuse the request's opcode
//! and request id; their payload starts with a status byte (0 for
//! success, an [`ErrorCode`] otherwise, followed by a UTF-8 message).
//! All integers are big-endian. Golden-byte tests pin the layout.

use std::fmt;

use crate::transport::Endpoint;

/// Frame header length: opcode byte plus request id.
pub const FRAME_HEADER: usize = 9;

/// Upper bound on a frame's payload; anything larger is malformed.
pub const MAX_PAYLOAD: usize = 64 << 20;

// Opcode table. 0x01 is a transport self-test; the rest are grouped by
// service.
pub const OP_ECHO: u8 = 0x01;
pub const OP_KV_PUT: u8 = 0x10;
pub const OP_KV_GET: u8 = 0x11;
pub const OP_PAGE_STORE: u8 = 0x20;
pub const OP_PAGE_FETCH: u8 = 0x21;
pub const OP_PAGE_STATS: u8 = 0x22;
pub const OP_PM_REGISTER: u8 = 0x30;
pub const OP_PM_HEARTBEAT: u8 = 0x31;
pub const OP_PM_LIST: u8 = 0x32;
pub const OP_VM_CREATE: u8 = 0x40;
pub const OP_VM_LATEST: u8 = 0x41;
pub const OP_VM_BEGIN: u8 = 0x42;
pub const OP_VM_REQUEST: u8 = 0x43;
pub const OP_VM_COMPLETE: u8 = 0x44;
pub const OP_VM_ABORT: u8 = 0x45;

/// Status byte of an error response.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
#[repr(u8)]
pub enum ErrorCode {
    UnknownOpcode = 1,
    MalformedPayload = 2,
    KeyConflict = 3,
    ValueTooLarge = 4,
    NullKey = 5,
    CapacityExceeded = 6,
    PageConflict = 7,
    DuplicateId = 8,
    UnknownProvider = 9,
    NoProvidersAvailable = 10,
    UnknownBlock = 11,
    InvalidGeometry = 12,
    UnknownTicket = 13,
    AbortedTicket = 14,
    NotPermitted = 15,
    Internal = 16,
}

impl ErrorCode {
    pub fn from_byte(byte: u8) -> Option<ErrorCode> {
        use ErrorCode::*;
        Some(match byte {
            1 => UnknownOpcode,
            2 => MalformedPayload,
            3 => KeyConflict,
            4 => ValueTooLarge,
            5 => NullKey,
            6 => CapacityExceeded,
            7 => PageConflict,
            8 => DuplicateId,
            9 => UnknownProvider,
            10 => NoProvidersAvailable,
            11 => UnknownBlock,
            12 => InvalidGeometry,
            13 => UnknownTicket,
            14 => AbortedTicket,
            15 => NotPermitted,
            16 => Internal,
            _ => return None,
        })
    }
}

/// An error answered by a service, as carried on the wire.
#[derive(Clone, PartialEq, Eq, thiserror::Error)]
pub struct ServiceError {
    pub code: ErrorCode,
    pub message: String,
}

impl ServiceError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        ServiceError { code, message: message.into() }
    }

    pub fn malformed(what: impl Into<String>) -> Self {
        ServiceError::new(ErrorCode::MalformedPayload, what)
    }

    pub fn unknown_opcode(opcode: u8) -> Self {
        ServiceError::new(ErrorCode::UnknownOpcode, format!("unknown opcode 0x{opcode:02x}"))
    }
}

impl fmt::Display for ServiceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.code, self.message)
    }
}

impl fmt::Debug for ServiceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// A decoded frame.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Frame {
    pub opcode: u8,
    pub request_id: u64,
    pub payload: Vec<u8>,
}

pub fn encode_frame(opcode: u8, request_id: u64, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + FRAME_HEADER + payload.len());
    out.extend_from_slice(&((FRAME_HEADER + payload.len()) as u32).to_be_bytes());
    out.push(opcode);
    out.extend_from_slice(&request_id.to_be_bytes());
    out.extend_from_slice(payload);
    out
}

/// Decodes one whole frame (length prefix included). Returns the frame
/// and the number of bytes consumed, or `None` when more bytes are
/// needed.
pub fn decode_frame(bytes: &[u8]) -> Result<Option<(Frame, usize)>, String> {
    if bytes.len() < 4 {
        return Ok(None);
    }
    let length = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
    if length < FRAME_HEADER {
        return Err(format!("frame length {length} below header size"));
    }
    if length > FRAME_HEADER + MAX_PAYLOAD {
        return Err(format!("frame length {length} exceeds cap"));
    }
    if bytes.len() < 4 + length {
        return Ok(None);
    }
    let opcode = bytes[4];
    let request_id = u64::from_be_bytes(bytes[5..13].try_into().unwrap());
    let payload = bytes[13..4 + length].to_vec();
    Ok(Some((Frame { opcode, request_id, payload }, 4 + length)))
}

/// Encodes a handler result as a response payload (status byte first).
pub fn encode_response(result: &Result<Vec<u8>, ServiceError>) -> Vec<u8> {
    match result {
        Ok(body) => {
            let mut out = Vec::with_capacity(1 + body.len());
            out.push(0);
            out.extend_from_slice(body);
            out
        }
        Err(error) => {
            let mut out = Vec::with_capacity(1 + error.message.len());
            out.push(error.code as u8);
            out.extend_from_slice(error.message.as_bytes());
            out
        }
    }
}

pub fn decode_response(payload: &[u8]) -> Result<Result<Vec<u8>, ServiceError>, String> {
    let (&status, body) = payload.split_first().ok_or("empty response payload")?;
    if status == 0 {
        return Ok(Ok(body.to_vec()));
    }
    let code = ErrorCode::from_byte(status).ok_or_else(|| format!("bad status byte {status}"))?;
    let message = String::from_utf8_lossy(body).into_owned();
    Ok(Err(ServiceError { code, message }))
}

/// Sequential reader over a request payload. Every accessor fails with
/// `MalformedPayload` instead of panicking, so fuzzed garbage can never
/// crash a decoder.
pub struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ServiceError> {
        if self.bytes.len() < n {
            return Err(ServiceError::malformed("payload truncated"));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    pub fn u8(&mut self) -> Result<u8, ServiceError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, ServiceError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, ServiceError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, ServiceError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn bytes16(&mut self) -> Result<[u8; 16], ServiceError> {
        Ok(self.take(16)?.try_into().unwrap())
    }

    pub fn endpoint(&mut self) -> Result<Endpoint, ServiceError> {
        let host_len = self.u16()? as usize;
        let host = std::str::from_utf8(self.take(host_len)?)
            .map_err(|_| ServiceError::malformed("endpoint host is not UTF-8"))?
            .to_string();
        let port = self.u16()?;
        Ok(Endpoint { host, port })
    }

    /// Consumes everything left.
    pub fn rest(&mut self) -> &'a [u8] {
        std::mem::take(&mut self.bytes)
    }

    /// Fails unless the payload was consumed exactly.
    pub fn finish(self) -> Result<(), ServiceError> {
        if self.bytes.is_empty() {
            Ok(())
        } else {
            Err(ServiceError::malformed("trailing bytes in payload"))
        }
    }
}

pub fn put_endpoint(out: &mut Vec<u8>, endpoint: &Endpoint) {
    let host = endpoint.host.as_bytes();
    out.extend_from_slice(&(host.len() as u16).to_be_bytes());
    out.extend_from_slice(host);
    out.extend_from_slice(&endpoint.port.to_be_bytes());
}
