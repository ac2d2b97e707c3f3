//! Deterministic in-process backend.
//!
//! Handlers are invoked directly on the caller's thread, so a blocking
//! handler behaves exactly like a blocking remote call. Interleaving
//! randomization comes from seeded per-message delays drawn from a
//! counter-indexed stream, and faults are injected as per-endpoint drop
//! probabilities (a dropped message surfaces as [`TransportError::Timeout`]).

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Endpoint, Handler, RpcError, ServerControl, ServerHandle, Transport, TransportError};

#[derive(Default)]
struct Registry {
    handlers: HashMap<Endpoint, Arc<dyn Handler>>,
    drop_rates: HashMap<Endpoint, f64>,
}

pub struct InprocTransport {
    seed: u64,
    /// Upper bound, in microseconds, of the random delay applied to each
    /// message leg. Zero disables shuffling.
    max_delay_micros: u64,
    counter: AtomicU64,
    next_port: AtomicU64,
    registry: Arc<Mutex<Registry>>,
}

impl InprocTransport {
    pub fn new(seed: u64) -> Self {
        InprocTransport {
            seed,
            max_delay_micros: 0,
            counter: AtomicU64::new(0),
            next_port: AtomicU64::new(1),
            registry: Arc::new(Mutex::new(Registry::default())),
        }
    }

    /// Enables seeded delivery-order shuffling with delays up to
    /// `micros` per message leg.
    pub fn with_delivery_shuffle(mut self, micros: u64) -> Self {
        self.max_delay_micros = micros;
        self
    }

    /// Drops the given fraction of calls to `endpoint` (0.0 to 1.0).
    pub fn set_drop_rate(&self, endpoint: &Endpoint, rate: f64) {
        self.registry.lock().drop_rates.insert(endpoint.clone(), rate);
    }

    fn per_call_rng(&self) -> ChaCha8Rng {
        // SplitMix64 over the global message counter: every call gets an
        // independent, seed-reproducible stream.
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        let mut z = self.seed ^ n.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
    }
}

impl Transport for InprocTransport {
    fn call(
        &self,
        endpoint: &Endpoint,
        opcode: u8,
        payload: &[u8],
        _timeout: Duration,
    ) -> Result<Vec<u8>, RpcError> {
        let (handler, drop_rate) = {
            let registry = self.registry.lock();
            let handler = registry
                .handlers
                .get(endpoint)
                .cloned()
                .ok_or(TransportError::ConnectionRefused)?;
            (handler, registry.drop_rates.get(endpoint).copied().unwrap_or(0.0))
        };

        let mut rng = self.per_call_rng();
        if drop_rate > 0.0 && rng.gen_bool(drop_rate.min(1.0)) {
            return Err(TransportError::Timeout.into());
        }
        if self.max_delay_micros > 0 {
            std::thread::sleep(Duration::from_micros(rng.gen_range(0..=self.max_delay_micros)));
        }
        let result = handler.handle(opcode, payload);
        if self.max_delay_micros > 0 {
            std::thread::sleep(Duration::from_micros(rng.gen_range(0..=self.max_delay_micros)));
        }
        result.map_err(RpcError::Service)
    }

    fn serve(
        &self,
        endpoint: &Endpoint,
        handler: Arc<dyn Handler>,
    ) -> Result<ServerHandle, TransportError> {
        let mut registry = self.registry.lock();
        // Port 0 asks for a fresh port, mirroring ephemeral TCP binds.
        let bound = if endpoint.port == 0 {
            loop {
                let port = self.next_port.fetch_add(1, Ordering::Relaxed) as u16;
                let candidate = Endpoint::new(endpoint.host.clone(), port.max(1));
                if !registry.handlers.contains_key(&candidate) {
                    break candidate;
                }
            }
        } else {
            endpoint.clone()
        };
        if registry.handlers.contains_key(&bound) {
            return Err(TransportError::AddressInUse);
        }
        registry.handlers.insert(bound.clone(), handler);
        Ok(ServerHandle::new(
            bound.clone(),
            Box::new(InprocControl { endpoint: bound, registry: self.registry.clone() }),
        ))
    }
}

struct InprocControl {
    endpoint: Endpoint,
    registry: Arc<Mutex<Registry>>,
}

impl ServerControl for InprocControl {
    fn shutdown(&mut self) {
        self.registry.lock().handlers.remove(&self.endpoint);
    }
}
