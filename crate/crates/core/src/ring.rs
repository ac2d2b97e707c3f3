//! The metadata store: a flat, write-once key-value space partitioned
//! across gateway nodes by key hash.
//!
//! Keys already come out of a cryptographic hash, so partitioning just
//! takes the first eight bytes modulo the gateway count; that spreads
//! requests evenly with high probability and lets clients hit many
//! gateways in parallel. Membership is fixed at deployment.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;

use crate::block::NodeKey;
use crate::sync::Semaphore;
use crate::transport::{Endpoint, Handler, RpcError, Transport};
use crate::wire::{self, ErrorCode, Reader, ServiceError};

/// Values above this are rejected; tree nodes are tiny and anything
/// bigger signals a serialization bug.
pub const MAX_VALUE_LEN: usize = 64 * 1024;

/// Default bound on in-flight requests per gateway connection.
pub const DEFAULT_PER_GATEWAY_IN_FLIGHT: usize = 128;

/// Gateway the key belongs to: first 8 key bytes, big-endian, modulo
/// the gateway count. Depends on nothing but the key bytes and count.
pub fn partition_of(key: &NodeKey, gateway_count: usize) -> usize {
    debug_assert!(gateway_count >= 1);
    let prefix = u64::from_be_bytes(key.0[..8].try_into().unwrap());
    (prefix % gateway_count as u64) as usize
}

/// Static ring membership handed to clients.
#[derive(Clone, Debug)]
pub struct RingConfig {
    pub gateways: Vec<(u64, Endpoint)>,
}

impl RingConfig {
    pub fn new(gateways: Vec<(u64, Endpoint)>) -> Self {
        assert!(!gateways.is_empty(), "ring needs at least one gateway");
        RingConfig { gateways }
    }

    pub fn gateway_for(&self, key: &NodeKey) -> &Endpoint {
        &self.gateways[partition_of(key, self.gateways.len())].1
    }
}

// --- gateway service --------------------------------------------------------

/// One metadata gateway: an append-only RAM map. Re-putting identical
/// bytes succeeds (writers may retry); different bytes for a live key
/// signal a collision or protocol bug and must abort the write.
pub struct GatewayService {
    store: Mutex<HashMap<NodeKey, Vec<u8>>>,
}

impl GatewayService {
    pub fn new() -> Arc<Self> {
        Arc::new(GatewayService { store: Mutex::new(HashMap::new()) })
    }

    pub fn len(&self) -> usize {
        self.store.lock().len()
    }

    fn put(&self, key: NodeKey, value: &[u8]) -> Result<(), ServiceError> {
        if key.is_null() {
            return Err(ServiceError::new(ErrorCode::NullKey, "the null key is reserved"));
        }
        if value.len() > MAX_VALUE_LEN {
            return Err(ServiceError::new(
                ErrorCode::ValueTooLarge,
                format!("{} bytes exceeds the {MAX_VALUE_LEN} byte cap", value.len()),
            ));
        }
        let mut store = self.store.lock();
        match store.get(&key) {
            None => {
                store.insert(key, value.to_vec());
                Ok(())
            }
            Some(existing) if existing == value => Ok(()),
            Some(_) => Err(ServiceError::new(
                ErrorCode::KeyConflict,
                format!("key {key} already bound to different bytes"),
            )),
        }
    }

    fn get(&self, key: NodeKey) -> Result<Option<Vec<u8>>, ServiceError> {
        if key.is_null() {
            return Err(ServiceError::new(ErrorCode::NullKey, "the null key is reserved"));
        }
        Ok(self.store.lock().get(&key).cloned())
    }
}

impl Handler for GatewayService {
    fn handle(&self, opcode: u8, payload: &[u8]) -> Result<Vec<u8>, ServiceError> {
        match opcode {
            wire::OP_KV_PUT => {
                let mut reader = Reader::new(payload);
                let key = NodeKey(reader.bytes16()?);
                let value = reader.rest();
                self.put(key, value)?;
                Ok(Vec::new())
            }
            wire::OP_KV_GET => {
                let mut reader = Reader::new(payload);
                let key = NodeKey(reader.bytes16()?);
                reader.finish()?;
                match self.get(key)? {
                    Some(value) => {
                        let mut out = Vec::with_capacity(1 + value.len());
                        out.push(1);
                        out.extend_from_slice(&value);
                        Ok(out)
                    }
                    None => Ok(vec![0]),
                }
            }
            other => Err(ServiceError::unknown_opcode(other)),
        }
    }
}

// --- ring client -------------------------------------------------------------

/// Client view of the ring: routes each key to its gateway and bounds
/// in-flight requests per gateway.
pub struct RingClient {
    transport: Arc<dyn Transport>,
    config: RingConfig,
    limits: Vec<Semaphore>,
    timeout: Duration,
}

impl RingClient {
    pub fn new(transport: Arc<dyn Transport>, config: RingConfig, timeout: Duration) -> Self {
        let limits =
            (0..config.gateways.len()).map(|_| Semaphore::new(DEFAULT_PER_GATEWAY_IN_FLIGHT)).collect();
        RingClient { transport, config, limits, timeout }
    }

    pub fn gateway_count(&self) -> usize {
        self.config.gateways.len()
    }

    pub fn put(&self, key: NodeKey, value: &[u8]) -> Result<(), RpcError> {
        let index = partition_of(&key, self.config.gateways.len());
        let _permit = self.limits[index].acquire();
        let mut payload = Vec::with_capacity(16 + value.len());
        payload.extend_from_slice(&key.0);
        payload.extend_from_slice(value);
        self.transport
            .call(&self.config.gateways[index].1, wire::OP_KV_PUT, &payload, self.timeout)?;
        Ok(())
    }

    pub fn get(&self, key: NodeKey) -> Result<Option<Vec<u8>>, RpcError> {
        let index = partition_of(&key, self.config.gateways.len());
        let _permit = self.limits[index].acquire();
        let raw =
            self.transport
                .call(&self.config.gateways[index].1, wire::OP_KV_GET, &key.0, self.timeout)?;
        let mut reader = Reader::new(&raw);
        let present = reader.u8().map_err(RpcError::Service)?;
        if present == 0 {
            return Ok(None);
        }
        Ok(Some(reader.rest().to_vec()))
    }
}
