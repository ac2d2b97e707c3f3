//! Data providers: storage nodes keeping page payloads in local RAM.
//!
//! The page id space is write-once. Providers trust nobody about
//! uniqueness: a duplicate store with identical bytes is an idempotent
//! success, different bytes for a known id is a conflict.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;

use crate::block::PageId;
use crate::transport::{Endpoint, Handler, RpcError, Transport};
use crate::wire::{self, ErrorCode, Reader, ServiceError};

/// Default capacity of one provider at desk scale.
pub const DEFAULT_CAPACITY: u64 = 256 << 20;

/// Counters reported by [`PageStoreService::stats`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ProviderStats {
    pub stored_bytes: u64,
    pub page_count: u64,
    pub capacity_bytes: u64,
}

struct Pages {
    by_id: HashMap<PageId, Arc<[u8]>>,
    stored_bytes: u64,
}

/// RAM page store of one provider.
pub struct PageStoreService {
    pages: Mutex<Pages>,
    capacity: u64,
}

impl PageStoreService {
    pub fn new(capacity: u64) -> Arc<Self> {
        Arc::new(PageStoreService {
            pages: Mutex::new(Pages { by_id: HashMap::new(), stored_bytes: 0 }),
            capacity,
        })
    }

    pub fn store(&self, page_id: PageId, payload: &[u8]) -> Result<(), ServiceError> {
        if payload.is_empty() {
            return Err(ServiceError::malformed("page payload must be non-empty"));
        }
        let mut pages = self.pages.lock();
        match pages.by_id.get(&page_id) {
            Some(existing) if existing.as_ref() == payload => return Ok(()),
            Some(_) => {
                return Err(ServiceError::new(
                    ErrorCode::PageConflict,
                    format!("page {page_id:?} already stored with different bytes"),
                ))
            }
            None => {}
        }
        if pages.stored_bytes + payload.len() as u64 > self.capacity {
            return Err(ServiceError::new(
                ErrorCode::CapacityExceeded,
                format!("{} of {} bytes used", pages.stored_bytes, self.capacity),
            ));
        }
        pages.stored_bytes += payload.len() as u64;
        pages.by_id.insert(page_id, payload.into());
        Ok(())
    }

    pub fn fetch(&self, page_id: PageId) -> Option<Arc<[u8]>> {
        self.pages.lock().by_id.get(&page_id).cloned()
    }

    pub fn stats(&self) -> ProviderStats {
        let pages = self.pages.lock();
        ProviderStats {
            stored_bytes: pages.stored_bytes,
            page_count: pages.by_id.len() as u64,
            capacity_bytes: self.capacity,
        }
    }
}

impl Handler for PageStoreService {
    fn handle(&self, opcode: u8, payload: &[u8]) -> Result<Vec<u8>, ServiceError> {
        match opcode {
            wire::OP_PAGE_STORE => {
                let mut reader = Reader::new(payload);
                let page_id = PageId::from_bytes(reader.bytes16()?);
                self.store(page_id, reader.rest())?;
                Ok(Vec::new())
            }
            wire::OP_PAGE_FETCH => {
                let mut reader = Reader::new(payload);
                let page_id = PageId::from_bytes(reader.bytes16()?);
                reader.finish()?;
                match self.fetch(page_id) {
                    Some(bytes) => {
                        let mut out = Vec::with_capacity(1 + bytes.len());
                        out.push(1);
                        out.extend_from_slice(&bytes);
                        Ok(out)
                    }
                    None => Ok(vec![0]),
                }
            }
            wire::OP_PAGE_STATS => {
                Reader::new(payload).finish()?;
                let stats = self.stats();
                let mut out = Vec::with_capacity(24);
                out.extend_from_slice(&stats.stored_bytes.to_be_bytes());
                out.extend_from_slice(&stats.page_count.to_be_bytes());
                out.extend_from_slice(&stats.capacity_bytes.to_be_bytes());
                Ok(out)
            }
            other => Err(ServiceError::unknown_opcode(other)),
        }
    }
}

// --- provider client ---------------------------------------------------------

/// Typed calls against one provider endpoint.
pub struct ProviderClient<'a> {
    pub transport: &'a dyn Transport,
    pub endpoint: &'a Endpoint,
    pub timeout: Duration,
}

impl ProviderClient<'_> {
    pub fn store_page(&self, page_id: PageId, payload: &[u8]) -> Result<(), RpcError> {
        let mut request = Vec::with_capacity(16 + payload.len());
        request.extend_from_slice(&page_id.to_bytes());
        request.extend_from_slice(payload);
        self.transport.call(self.endpoint, wire::OP_PAGE_STORE, &request, self.timeout)?;
        Ok(())
    }

    pub fn fetch_page(&self, page_id: PageId) -> Result<Option<Vec<u8>>, RpcError> {
        let raw =
            self.transport.call(self.endpoint, wire::OP_PAGE_FETCH, &page_id.to_bytes(), self.timeout)?;
        let mut reader = Reader::new(&raw);
        let present = reader.u8().map_err(RpcError::Service)?;
        if present == 0 {
            return Ok(None);
        }
        Ok(Some(reader.rest().to_vec()))
    }

    pub fn stats(&self) -> Result<ProviderStats, RpcError> {
        let raw = self.transport.call(self.endpoint, wire::OP_PAGE_STATS, &[], self.timeout)?;
        let mut reader = Reader::new(&raw);
        Ok(ProviderStats {
            stored_bytes: reader.u64().map_err(RpcError::Service)?,
            page_count: reader.u64().map_err(RpcError::Service)?,
            capacity_bytes: reader.u64().map_err(RpcError::Service)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sync::parallel_map;
    use crate::transport::InprocTransport;

    fn fixture(capacity: u64) -> (Arc<InprocTransport>, Endpoint, crate::transport::ServerHandle) {
        let transport = Arc::new(InprocTransport::new(5));
        let server = transport
            .serve(&Endpoint::new("provider".to_string(), 0), PageStoreService::new(capacity))
            .unwrap();
        let endpoint = server.endpoint().clone();
        (transport, endpoint, server)
    }

    fn client<'a>(
        transport: &'a Arc<InprocTransport>,
        endpoint: &'a Endpoint,
    ) -> ProviderClient<'a> {
        ProviderClient {
            transport: transport.as_ref(),
            endpoint,
            timeout: Duration::from_secs(1),
        }
    }

    #[test]
    fn store_fetch_round_trip() {
        let (transport, endpoint, _server) = fixture(1 << 20);
        let c = client(&transport, &endpoint);
        let payload = vec![7u8; 4096];
        c.store_page(PageId(1), &payload).unwrap();
        assert_eq!(c.fetch_page(PageId(1)).unwrap().unwrap(), payload);
        assert_eq!(c.fetch_page(PageId(2)).unwrap(), None);
        // Idempotent duplicate.
        c.store_page(PageId(1), &payload).unwrap();
        // Conflicting bytes rejected.
        let err = c.store_page(PageId(1), &vec![8u8; 4096]).unwrap_err();
        assert!(matches!(err, RpcError::Service(se) if se.code == ErrorCode::PageConflict));
    }

    #[test]
    fn capacity_limit_enforced() {
        let (transport, endpoint, _server) = fixture(8192);
        let c = client(&transport, &endpoint);
        c.store_page(PageId(1), &[1u8; 4096]).unwrap();
        c.store_page(PageId(2), &[2u8; 4096]).unwrap();
        let err = c.store_page(PageId(3), &[3u8; 4096]).unwrap_err();
        assert!(matches!(err, RpcError::Service(se) if se.code == ErrorCode::CapacityExceeded));
        // Accounting still exact.
        assert_eq!(c.stats().unwrap().stored_bytes, 8192);
    }

    #[test]
    fn stats_track_store_only_workload() {
        let (transport, endpoint, _server) = fixture(64 << 20);
        let c = client(&transport, &endpoint);
        assert_eq!(
            c.stats().unwrap(),
            ProviderStats { stored_bytes: 0, page_count: 0, capacity_bytes: 64 << 20 }
        );
        let mut last = 0;
        for i in 0..10u64 {
            c.store_page(PageId(i as u128), &vec![i as u8; 65536]).unwrap();
            let stats = c.stats().unwrap();
            assert_eq!(stats.stored_bytes, (i + 1) * 65536);
            assert!(stats.stored_bytes >= last);
            last = stats.stored_bytes;
        }
    }

    #[test]
    fn parallel_fetches_return_exact_payloads() {
        let (transport, endpoint, _server) = fixture(64 << 20);
        let c = client(&transport, &endpoint);
        let payloads: Vec<Vec<u8>> = (0..256u32)
            .map(|i| i.to_be_bytes().repeat(1024)) // 4 KiB, distinct per page
            .collect();
        for (i, payload) in payloads.iter().enumerate() {
            c.store_page(PageId(i as u128), payload).unwrap();
        }
        let fetched = parallel_map((0..256usize).collect(), 32, |i| {
            client(&transport, &endpoint).fetch_page(PageId(i as u128)).unwrap().unwrap()
        });
        for (i, bytes) in fetched.iter().enumerate() {
            assert_eq!(bytes, &payloads[i], "page {i}");
        }
    }
}
