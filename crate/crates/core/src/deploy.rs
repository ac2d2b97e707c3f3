//! Local constellations: one versioning manager, one provider manager,
//! n data providers and m metadata gateways, all served on the given
//! transport.
//!
//! Data providers heartbeat their stored-byte load to the provider
//! manager on a background thread so client placement stays load-aware.
//! `deploy_local` returns only after every provider is registered.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::client::{Client, ClientConfig};
use crate::manager::{ManagerClient, ProviderManagerService, DEFAULT_LIVENESS_WINDOW};
use crate::provider::PageStoreService;
use crate::ring::GatewayService;
use crate::transport::{Endpoint, RpcError, ServerHandle, Transport, TransportError};
use crate::versioning::{VersioningService, VmConfig, VmEvent};

#[derive(Clone, Debug)]
pub struct DeployConfig {
    pub data_providers: usize,
    pub metadata_providers: usize,
    pub capacity_per_provider: u64,
    /// Host every service binds on ("127.0.0.1" for TCP; any name works
    /// in-process). Ports are always ephemeral.
    pub listen_host: String,
    pub heartbeat_period: Duration,
    pub liveness_window: Duration,
    pub vm: VmConfig,
}

impl DeployConfig {
    pub fn new(data_providers: usize, metadata_providers: usize) -> Self {
        DeployConfig {
            data_providers,
            metadata_providers,
            capacity_per_provider: crate::provider::DEFAULT_CAPACITY,
            listen_host: "127.0.0.1".to_string(),
            heartbeat_period: crate::manager::DEFAULT_HEARTBEAT_PERIOD,
            liveness_window: DEFAULT_LIVENESS_WINDOW,
            vm: VmConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DeployError {
    #[error("transport: {0}")]
    Transport(#[from] TransportError),
    #[error("startup rpc failed: {0}")]
    Startup(#[from] RpcError),
}

/// A running constellation plus direct handles on its services for
/// inspection in tests and benches.
pub struct Constellation {
    transport: Arc<dyn Transport>,
    versioning_endpoint: Endpoint,
    manager_endpoint: Endpoint,
    gateway_endpoints: Vec<(u64, Endpoint)>,
    provider_endpoints: Vec<(u64, Endpoint)>,
    versioning: Arc<VersioningService>,
    providers: Vec<Arc<PageStoreService>>,
    gateways: Vec<Arc<GatewayService>>,
    servers: Vec<ServerHandle>,
    heartbeat_stop: Arc<AtomicBool>,
    heartbeat_thread: Option<std::thread::JoinHandle<()>>,
}

/// Spawns every service of a constellation on `transport` and blocks
/// until all data providers are registered.
pub fn deploy_local(
    transport: Arc<dyn Transport>,
    config: DeployConfig,
) -> Result<Constellation, DeployError> {
    let host = config.listen_host.clone();
    let ephemeral = |_: &str| Endpoint::new(host.clone(), 0);
    let mut servers = Vec::new();

    let versioning = VersioningService::new(config.vm);
    let server = transport.serve(&ephemeral("vm"), versioning.clone())?;
    let versioning_endpoint = server.endpoint().clone();
    servers.push(server);

    let manager = ProviderManagerService::new(config.liveness_window);
    let server = transport.serve(&ephemeral("pm"), manager.clone())?;
    let manager_endpoint = server.endpoint().clone();
    servers.push(server);

    let mut gateways = Vec::new();
    let mut gateway_endpoints = Vec::new();
    for i in 0..config.metadata_providers.max(1) {
        let gateway = GatewayService::new();
        let server = transport.serve(&ephemeral("gw"), gateway.clone())?;
        gateway_endpoints.push((i as u64, server.endpoint().clone()));
        gateways.push(gateway);
        servers.push(server);
    }

    let mut providers = Vec::new();
    let mut provider_endpoints = Vec::new();
    for i in 0..config.data_providers.max(1) {
        let provider = PageStoreService::new(config.capacity_per_provider);
        let server = transport.serve(&ephemeral("dp"), provider.clone())?;
        provider_endpoints.push((i as u64 + 1, server.endpoint().clone()));
        providers.push(provider);
        servers.push(server);
    }

    // Register every provider; deploy completes only when the manager
    // lists them all.
    {
        let pm = ManagerClient {
            transport: transport.as_ref(),
            endpoint: &manager_endpoint,
            timeout: crate::transport::DEFAULT_TIMEOUT,
        };
        for (id, endpoint) in &provider_endpoints {
            pm.register(*id, config.capacity_per_provider, endpoint)?;
        }
        let active = pm.list_active(u32::MAX)?;
        debug_assert_eq!(active.len(), provider_endpoints.len());
    }

    // Load reporting loop for all providers.
    let heartbeat_stop = Arc::new(AtomicBool::new(false));
    let heartbeat_thread = {
        let stop = heartbeat_stop.clone();
        let transport = transport.clone();
        let manager_endpoint = manager_endpoint.clone();
        let providers: Vec<(u64, Arc<PageStoreService>)> = provider_endpoints
            .iter()
            .map(|(id, _)| *id)
            .zip(providers.iter().cloned())
            .map(|(id, p)| (id, p))
            .collect();
        let period = config.heartbeat_period;
        std::thread::spawn(move || {
            while !stop.load(Ordering::Relaxed) {
                std::thread::sleep(period);
                if stop.load(Ordering::Relaxed) {
                    return;
                }
                let pm = ManagerClient {
                    transport: transport.as_ref(),
                    endpoint: &manager_endpoint,
                    timeout: crate::transport::DEFAULT_TIMEOUT,
                };
                for (id, provider) in &providers {
                    if pm.heartbeat(*id, provider.stats().stored_bytes).is_err() {
                        log::warn!("heartbeat for provider {id} failed");
                    }
                }
            }
        })
    };

    Ok(Constellation {
        transport,
        versioning_endpoint,
        manager_endpoint,
        gateway_endpoints,
        provider_endpoints,
        versioning,
        providers,
        gateways,
        servers,
        heartbeat_stop,
        heartbeat_thread: Some(heartbeat_thread),
    })
}

impl Constellation {
    pub fn client_config(&self) -> ClientConfig {
        ClientConfig::new(
            self.versioning_endpoint.clone(),
            self.manager_endpoint.clone(),
            self.gateway_endpoints.clone(),
        )
    }

    /// A client bound to this constellation over its transport.
    pub fn client(&self, seed: Option<u64>) -> Client {
        let mut config = self.client_config();
        config.seed = seed;
        Client::new(self.transport.clone(), config)
    }

    pub fn transport(&self) -> Arc<dyn Transport> {
        self.transport.clone()
    }

    pub fn versioning_endpoint(&self) -> &Endpoint {
        &self.versioning_endpoint
    }

    pub fn manager_endpoint(&self) -> &Endpoint {
        &self.manager_endpoint
    }

    pub fn gateway_endpoints(&self) -> &[(u64, Endpoint)] {
        &self.gateway_endpoints
    }

    pub fn provider_endpoints(&self) -> &[(u64, Endpoint)] {
        &self.provider_endpoints
    }

    /// Versioning manager event log (protocol transitions in commit order).
    pub fn vm_events(&self) -> Vec<VmEvent> {
        self.versioning.events()
    }

    pub fn vm_service(&self) -> &Arc<VersioningService> {
        &self.versioning
    }

    /// Stored bytes per data provider, by deployment order.
    pub fn provider_loads(&self) -> Vec<u64> {
        self.providers.iter().map(|p| p.stats().stored_bytes).collect()
    }

    /// Stored key count per gateway, by deployment order.
    pub fn gateway_key_counts(&self) -> Vec<usize> {
        self.gateways.iter().map(|g| g.len()).collect()
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            versioning: self.versioning_endpoint.to_string(),
            provider_manager: self.manager_endpoint.to_string(),
            gateways: self
                .gateway_endpoints
                .iter()
                .map(|(id, e)| (*id, e.to_string()))
                .collect(),
            providers: self
                .provider_endpoints
                .iter()
                .map(|(id, e)| (*id, e.to_string()))
                .collect(),
        }
    }

    /// Stops heartbeats and shuts every server down.
    pub fn shutdown(mut self) {
        self.stop_heartbeat();
        for server in self.servers.drain(..) {
            server.shutdown();
        }
    }

    fn stop_heartbeat(&mut self) {
        self.heartbeat_stop.store(true, Ordering::Relaxed);
        if let Some(thread) = self.heartbeat_thread.take() {
            thread.join().ok();
        }
    }
}

impl Drop for Constellation {
    fn drop(&mut self) {
        self.stop_heartbeat();
    }
}

/// Endpoint listing written by `deploy` and consumed by the other CLI
/// subcommands (and by out-of-process bench workers).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub versioning: String,
    pub provider_manager: String,
    pub gateways: Vec<(u64, String)>,
    pub providers: Vec<(u64, String)>,
}

impl Manifest {
    pub fn client_config(&self) -> Option<ClientConfig> {
        let versioning = Endpoint::parse(&self.versioning)?;
        let provider_manager = Endpoint::parse(&self.provider_manager)?;
        let mut gateways = Vec::with_capacity(self.gateways.len());
        for (id, raw) in &self.gateways {
            gateways.push((*id, Endpoint::parse(raw)?));
        }
        Some(ClientConfig::new(versioning, provider_manager, gateways))
    }
}
