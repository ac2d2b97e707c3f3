//! Provider manager: the registry data providers announce themselves
//! to, and the place clients ask for storage targets.
//!
//! Liveness is heartbeat-driven: a provider that has not reported
//! within the liveness window drops out of `list_active` until it
//! reports again. Answers are load-sorted so clients can spread new
//! pages onto the least loaded nodes.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use crate::transport::{Endpoint, Handler, RpcError, Transport};
use crate::wire::{self, put_endpoint, ErrorCode, Reader, ServiceError};

/// Default liveness window; heartbeats are expected every 2 s.
pub const DEFAULT_LIVENESS_WINDOW: Duration = Duration::from_secs(10);
pub const DEFAULT_HEARTBEAT_PERIOD: Duration = Duration::from_secs(2);

/// A registered provider as reported to clients.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ProviderInfo {
    pub provider_id: u64,
    pub endpoint: Endpoint,
    pub load_bytes: u64,
}

struct Registered {
    endpoint: Endpoint,
    load_bytes: u64,
    last_heartbeat: Instant,
}

pub struct ProviderManagerService {
    providers: Mutex<HashMap<u64, Registered>>,
    liveness_window: Duration,
}

impl ProviderManagerService {
    pub fn new(liveness_window: Duration) -> Arc<Self> {
        Arc::new(ProviderManagerService { providers: Mutex::new(HashMap::new()), liveness_window })
    }

    pub fn register(&self, provider_id: u64, endpoint: Endpoint) -> Result<(), ServiceError> {
        let mut providers = self.providers.lock();
        if providers.contains_key(&provider_id) {
            return Err(ServiceError::new(
                ErrorCode::DuplicateId,
                format!("provider {provider_id} already registered"),
            ));
        }
        providers.insert(
            provider_id,
            Registered { endpoint, load_bytes: 0, last_heartbeat: Instant::now() },
        );
        Ok(())
    }

    pub fn heartbeat(&self, provider_id: u64, load_bytes: u64) -> Result<(), ServiceError> {
        let mut providers = self.providers.lock();
        let Some(provider) = providers.get_mut(&provider_id) else {
            return Err(ServiceError::new(
                ErrorCode::UnknownProvider,
                format!("provider {provider_id} is not registered"),
            ));
        };
        provider.load_bytes = load_bytes;
        provider.last_heartbeat = Instant::now();
        Ok(())
    }

    /// Active providers, least loaded first, ties broken by id.
    pub fn list_active(&self, max_count: usize) -> Result<Vec<ProviderInfo>, ServiceError> {
        let now = Instant::now();
        let providers = self.providers.lock();
        let mut active: Vec<ProviderInfo> = providers
            .iter()
            .filter(|(_, p)| now.duration_since(p.last_heartbeat) <= self.liveness_window)
            .map(|(&provider_id, p)| ProviderInfo {
                provider_id,
                endpoint: p.endpoint.clone(),
                load_bytes: p.load_bytes,
            })
            .collect();
        if active.is_empty() {
            return Err(ServiceError::new(
                ErrorCode::NoProvidersAvailable,
                "no active data providers",
            ));
        }
        active.sort_by_key(|p| (p.load_bytes, p.provider_id));
        active.truncate(max_count.max(1));
        Ok(active)
    }
}

impl Handler for ProviderManagerService {
    fn handle(&self, opcode: u8, payload: &[u8]) -> Result<Vec<u8>, ServiceError> {
        match opcode {
            wire::OP_PM_REGISTER => {
                let mut reader = Reader::new(payload);
                let provider_id = reader.u64()?;
                let _capacity = reader.u64()?;
                let endpoint = reader.endpoint()?;
                reader.finish()?;
                self.register(provider_id, endpoint)?;
                Ok(Vec::new())
            }
            wire::OP_PM_HEARTBEAT => {
                let mut reader = Reader::new(payload);
                let provider_id = reader.u64()?;
                let load = reader.u64()?;
                reader.finish()?;
                self.heartbeat(provider_id, load)?;
                Ok(Vec::new())
            }
            wire::OP_PM_LIST => {
                let mut reader = Reader::new(payload);
                let max_count = reader.u32()? as usize;
                reader.finish()?;
                let active = self.list_active(max_count)?;
                let mut out = Vec::with_capacity(4 + active.len() * 32);
                out.extend_from_slice(&(active.len() as u32).to_be_bytes());
                for info in &active {
                    out.extend_from_slice(&info.provider_id.to_be_bytes());
                    out.extend_from_slice(&info.load_bytes.to_be_bytes());
                    put_endpoint(&mut out, &info.endpoint);
                }
                Ok(out)
            }
            other => Err(ServiceError::unknown_opcode(other)),
        }
    }
}

// --- manager client ----------------------------------------------------------

pub struct ManagerClient<'a> {
    pub transport: &'a dyn Transport,
    pub endpoint: &'a Endpoint,
    pub timeout: Duration,
}

impl ManagerClient<'_> {
    pub fn register(
        &self,
        provider_id: u64,
        capacity: u64,
        endpoint: &Endpoint,
    ) -> Result<(), RpcError> {
        let mut request = Vec::with_capacity(32);
        request.extend_from_slice(&provider_id.to_be_bytes());
        request.extend_from_slice(&capacity.to_be_bytes());
        put_endpoint(&mut request, endpoint);
        self.transport.call(self.endpoint, wire::OP_PM_REGISTER, &request, self.timeout)?;
        Ok(())
    }

    pub fn heartbeat(&self, provider_id: u64, load_bytes: u64) -> Result<(), RpcError> {
        let mut request = Vec::with_capacity(16);
        request.extend_from_slice(&provider_id.to_be_bytes());
        request.extend_from_slice(&load_bytes.to_be_bytes());
        self.transport.call(self.endpoint, wire::OP_PM_HEARTBEAT, &request, self.timeout)?;
        Ok(())
    }

    pub fn list_active(&self, max_count: u32) -> Result<Vec<ProviderInfo>, RpcError> {
        let raw = self.transport.call(
            self.endpoint,
            wire::OP_PM_LIST,
            &max_count.to_be_bytes(),
            self.timeout,
        )?;
        let mut reader = Reader::new(&raw);
        let count = reader.u32().map_err(RpcError::Service)?;
        let mut providers = Vec::with_capacity(count as usize);
        for _ in 0..count {
            providers.push(ProviderInfo {
                provider_id: reader.u64().map_err(RpcError::Service)?,
                load_bytes: reader.u64().map_err(RpcError::Service)?,
                endpoint: reader.endpoint().map_err(RpcError::Service)?,
            });
        }
        Ok(providers)
    }
}
