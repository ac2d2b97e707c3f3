//! Client library: alloc / write / read against a running constellation.
//!
//! A write runs in four stages. First the pages are pushed, in
//! parallel, onto data providers picked by rotating through the
//! load-sorted active list. Only then is a version number taken, so
//! the serialization window stays short. Stage two writes every tree
//! node that lies entirely inside the written range; those depend on
//! nothing outside the write. Stage three waits for completion
//! permission (FIFO per block), then builds the boundary nodes, copying
//! untouched-sibling keys out of the latest previously completed tree.
//! Stage four publishes the version. A write that fails after taking a
//! version aborts it so the queue never wedges; its orphaned pages and
//! nodes are tolerated garbage.
//!
//! Reads resolve a version (the latest, unless the caller pinned one),
//! descend the version's tree level by level with parallel metadata
//! gets, fetch the pages in parallel, and slice the exact byte range
//! out of them. Subtrees behind a null key read as zeros.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::block::{BlockDescriptor, BlockId, ByteRange, PageId, Version};
use crate::manager::{ManagerClient, ProviderInfo};
use crate::provider::ProviderClient;
use crate::ring::{RingClient, RingConfig};
use crate::transport::{Endpoint, RpcError, Transport, DEFAULT_TIMEOUT};
use crate::tree::{
    self, decode_node, encode_node, NodeBody, PageLocation, PagePlacement, TreeError, TreeNode,
};
use crate::versioning::VersioningClient;
use crate::wire::ErrorCode;

#[derive(Clone, Debug)]
pub struct ClientConfig {
    pub versioning: Endpoint,
    pub provider_manager: Endpoint,
    pub gateways: Vec<(u64, Endpoint)>,
    /// Bound on parallel RPCs within one operation.
    pub max_in_flight: usize,
    /// Attempts per page across distinct providers before giving up.
    pub store_retry_limit: usize,
    /// Seed for page id generation; `None` draws from the OS.
    pub seed: Option<u64>,
    pub call_timeout: Duration,
    /// Budget for waiting on completion permission behind other writers.
    pub completion_timeout: Duration,
}

impl ClientConfig {
    pub fn new(
        versioning: Endpoint,
        provider_manager: Endpoint,
        gateways: Vec<(u64, Endpoint)>,
    ) -> Self {
        ClientConfig {
            versioning,
            provider_manager,
            gateways,
            max_in_flight: 64,
            store_retry_limit: 3,
            seed: None,
            call_timeout: DEFAULT_TIMEOUT,
            completion_timeout: Duration::from_secs(300),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ClientError {
    #[error("invalid block geometry: {0}")]
    InvalidGeometry(String),
    #[error("unknown block")]
    UnknownBlock,
    #[error("write range must be page-aligned")]
    UnalignedWrite,
    #[error("range out of block bounds")]
    RangeOutOfBounds,
    #[error("version is not published")]
    VersionNotPublished,
    #[error("no data provider available: {0}")]
    NoProvidersAvailable(String),
    #[error("write {version} aborted: {cause}")]
    WriteAborted { version: Version, cause: String },
    #[error("read failed: {0}")]
    ReadFailed(String),
    #[error("rpc failed: {0}")]
    Rpc(String),
}

impl From<RpcError> for ClientError {
    fn from(error: RpcError) -> Self {
        match &error {
            RpcError::Service(se) => match se.code {
                ErrorCode::UnknownBlock => ClientError::UnknownBlock,
                ErrorCode::InvalidGeometry => ClientError::InvalidGeometry(se.message.clone()),
                ErrorCode::NoProvidersAvailable => {
                    ClientError::NoProvidersAvailable(se.message.clone())
                }
                _ => ClientError::Rpc(error.to_string()),
            },
            RpcError::Transport(_) => ClientError::Rpc(error.to_string()),
        }
    }
}

/// Wall-clock split of one operation, for the benchmark harness.
/// The metadata phase and the data phase never overlap.
#[derive(Clone, Copy, Debug, Default)]
pub struct OpStats {
    pub total: Duration,
    pub metadata: Duration,
    pub data: Duration,
}

/// Thread-safe client handle. Operations on one handle proceed
/// concurrently; each is internally parallel up to `max_in_flight`.
pub struct Client {
    transport: Arc<dyn Transport>,
    config: ClientConfig,
    ring: RingClient,
    page_rng: Mutex<ChaCha8Rng>,
    placement_cursor: AtomicU64,
    descriptors: Mutex<HashMap<BlockId, BlockDescriptor>>,
}

impl Client {
    pub fn new(transport: Arc<dyn Transport>, config: ClientConfig) -> Self {
        assert!(!config.gateways.is_empty(), "gateway list must be non-empty");
        let ring = RingClient::new(
            transport.clone(),
            RingConfig::new(config.gateways.clone()),
            config.call_timeout,
        );
        let page_rng = match config.seed {
            Some(seed) => ChaCha8Rng::seed_from_u64(seed),
            None => ChaCha8Rng::from_rng(rand::thread_rng()).expect("seed from entropy"),
        };
        Client {
            transport,
            config,
            ring,
            page_rng: Mutex::new(page_rng),
            placement_cursor: AtomicU64::new(0),
            descriptors: Mutex::new(HashMap::new()),
        }
    }

    fn versioning(&self) -> VersioningClient<'_> {
        VersioningClient {
            transport: self.transport.as_ref(),
            endpoint: &self.config.versioning,
            timeout: self.config.call_timeout,
            completion_timeout: self.config.completion_timeout,
        }
    }

    fn manager(&self) -> ManagerClient<'_> {
        ManagerClient {
            transport: self.transport.as_ref(),
            endpoint: &self.config.provider_manager,
            timeout: self.config.call_timeout,
        }
    }

    fn provider<'a>(&'a self, endpoint: &'a Endpoint) -> ProviderClient<'a> {
        ProviderClient {
            transport: self.transport.as_ref(),
            endpoint,
            timeout: self.config.call_timeout,
        }
    }

    /// Allocates a block; readable as zeros at version 0 right away.
    pub fn alloc(&self, page_size: u64, data_size: u64) -> Result<BlockId, ClientError> {
        let descriptor = self.versioning().create_block(page_size, data_size)?;
        self.descriptors.lock().insert(descriptor.block_id, descriptor);
        Ok(descriptor.block_id)
    }

    fn descriptor(&self, block: BlockId) -> Result<BlockDescriptor, ClientError> {
        if let Some(d) = self.descriptors.lock().get(&block) {
            return Ok(*d);
        }
        let (_, descriptor) = self.versioning().latest(block)?;
        self.descriptors.lock().insert(block, descriptor);
        Ok(descriptor)
    }

    /// Latest published version of the block.
    pub fn latest(&self, block: BlockId) -> Result<Version, ClientError> {
        Ok(self.versioning().latest(block)?.0)
    }

    pub fn write(&self, block: BlockId, buffer: &[u8], offset: u64) -> Result<Version, ClientError> {
        self.write_timed(block, buffer, offset).map(|(version, _)| version)
    }

    pub fn read(
        &self,
        block: BlockId,
        version: Option<Version>,
        offset: u64,
        size: u64,
    ) -> Result<Vec<u8>, ClientError> {
        self.read_timed(block, version, offset, size).map(|(bytes, _)| bytes)
    }

    /// `write` plus the metadata/data wall-time split.
    pub fn write_timed(
        &self,
        block: BlockId,
        buffer: &[u8],
        offset: u64,
    ) -> Result<(Version, OpStats), ClientError> {
        let started = Instant::now();
        let descriptor = self.descriptor(block)?;
        let range = ByteRange::new(offset, buffer.len() as u64);
        if !descriptor.range_in_bounds(&range) {
            return Err(ClientError::RangeOutOfBounds);
        }
        if !descriptor.range_page_aligned(&range) {
            return Err(ClientError::UnalignedWrite);
        }

        // Stage 1: place and store the pages.
        let data_started = Instant::now();
        let placements = self.store_pages(&descriptor, range, buffer)?;
        let data = data_started.elapsed();

        // Stages 2-4 all manipulate metadata; a failure anywhere after
        // the version is taken must abort it.
        let metadata_started = Instant::now();
        let vm = self.versioning();
        let version = vm.begin_write(block)?;
        let outcome = self.publish_metadata(&descriptor, range, placements, version);
        let metadata = metadata_started.elapsed();
        match outcome {
            Ok(()) => Ok((version, OpStats { total: started.elapsed(), metadata, data })),
            Err(cause) => {
                vm.abort_write(block, version).ok();
                Err(ClientError::WriteAborted { version, cause })
            }
        }
    }

    /// Stage 1: assign a provider and a random page id to every page,
    /// then store them in parallel. A page that a provider refuses
    /// (full or unreachable) is retried on the next provider in the
    /// rotation.
    fn store_pages(
        &self,
        descriptor: &BlockDescriptor,
        range: ByteRange,
        buffer: &[u8],
    ) -> Result<Vec<PagePlacement>, ClientError> {
        let page_size = descriptor.page_size;
        let (first_page, last_page) = crate::block::range_to_pages(range, page_size);
        let page_count = (last_page - first_page + 1) as usize;

        let providers = self.manager().list_active(u32::MAX)?;
        let base = self.placement_cursor.fetch_add(page_count as u64, Ordering::Relaxed);

        let page_ids: Vec<PageId> = {
            let mut rng = self.page_rng.lock();
            (0..page_count).map(|_| PageId(rng.gen())).collect()
        };

        let jobs: Vec<(usize, PageId)> = page_ids.into_iter().enumerate().collect();
        let results = crate::sync::parallel_map(jobs, self.config.max_in_flight, |(i, page_id)| {
            let page_index = first_page + i as u64;
            let payload = &buffer[i * page_size as usize..(i + 1) * page_size as usize];
            let mut last_error = String::new();
            for attempt in 0..self.config.store_retry_limit.max(1) {
                let slot = (base as usize + i + attempt) % providers.len();
                let target: &ProviderInfo = &providers[slot];
                match self.provider(&target.endpoint).store_page(page_id, payload) {
                    Ok(()) => {
                        return Ok(PagePlacement {
                            page_index,
                            page_id,
                            provider_id: target.provider_id,
                            endpoint: target.endpoint.clone(),
                        })
                    }
                    Err(error) => last_error = error.to_string(),
                }
            }
            Err(last_error)
        });

        results
            .into_iter()
            .collect::<Result<Vec<_>, String>>()
            .map_err(|cause| {
                ClientError::NoProvidersAvailable(format!("page store exhausted retries: {cause}"))
            })
    }

    /// Stages 2-4 for one write. Any error here aborts the version.
    fn publish_metadata(
        &self,
        descriptor: &BlockDescriptor,
        range: ByteRange,
        placements: Vec<PagePlacement>,
        version: Version,
    ) -> Result<(), String> {
        let plan = tree::plan_write(descriptor, range, &placements, version)
            .map_err(|e| e.to_string())?;

        // Stage 2: nodes totally inside the range.
        self.put_nodes(&plan.stage2)?;

        // Stage 3: wait for our turn, then stitch the boundary to the
        // latest completed predecessor.
        let predecessor = self
            .versioning()
            .request_completion(descriptor.block_id, version)
            .map_err(|e| e.to_string())?;
        let mut walker = PrevTreeWalker::new(&self.ring, descriptor, predecessor);
        let resolved =
            tree::resolve_boundary(&plan, |sibling| walker.key_for(sibling)).map_err(|e| e.to_string())?;
        self.put_nodes(&resolved)?;

        // Stage 4: publish.
        self.versioning()
            .complete_write(descriptor.block_id, version)
            .map_err(|e| e.to_string())
    }

    fn put_nodes(&self, nodes: &[(crate::block::NodeKey, TreeNode)]) -> Result<(), String> {
        let jobs: Vec<(crate::block::NodeKey, Vec<u8>)> =
            nodes.iter().map(|(key, node)| (*key, encode_node(node))).collect();
        let results = crate::sync::parallel_map(jobs, self.config.max_in_flight, |(key, bytes)| {
            self.ring.put(key, &bytes).map_err(|e| e.to_string())
        });
        results.into_iter().collect::<Result<Vec<_>, String>>()?;
        Ok(())
    }

    /// `read` plus the metadata/data wall-time split.
    pub fn read_timed(
        &self,
        block: BlockId,
        version: Option<Version>,
        offset: u64,
        size: u64,
    ) -> Result<(Vec<u8>, OpStats), ClientError> {
        let started = Instant::now();
        let metadata_started = Instant::now();
        let vm = self.versioning();
        let (version, descriptor) = match version {
            None => {
                let (latest, descriptor) = vm.latest(block)?;
                self.descriptors.lock().insert(block, descriptor);
                (latest, descriptor)
            }
            Some(v) if v.0 == 0 => (v, self.descriptor(block)?),
            Some(v) => {
                let (_, descriptor, published) = vm.check_version(block, v)?;
                self.descriptors.lock().insert(block, descriptor);
                if !published {
                    return Err(ClientError::VersionNotPublished);
                }
                (v, descriptor)
            }
        };

        let range = ByteRange::new(offset, size);
        if !descriptor.range_in_bounds(&range) {
            return Err(ClientError::RangeOutOfBounds);
        }

        let slots = tree::plan_read(&descriptor, range, version, |keys| {
            let results =
                crate::sync::parallel_map(keys.to_vec(), self.config.max_in_flight, |key| {
                    match self.ring.get(key) {
                        Ok(Some(bytes)) => decode_node(&bytes).map(Some),
                        Ok(None) => Ok(None),
                        Err(error) => Err(TreeError::Fetch(error.to_string())),
                    }
                });
            results.into_iter().collect()
        })
        .map_err(|e| match e {
            TreeError::RangeOutOfBounds => ClientError::RangeOutOfBounds,
            other => ClientError::ReadFailed(other.to_string()),
        })?;
        let metadata = metadata_started.elapsed();

        // Fetch the stored pages in parallel; zero-filled pages need no
        // traffic at all.
        let data_started = Instant::now();
        let page_size = descriptor.page_size;
        let stored: Vec<PagePlacement> = slots
            .iter()
            .filter_map(|slot| match &slot.location {
                PageLocation::Stored(placement) => Some(placement.clone()),
                PageLocation::ZeroFill => None,
            })
            .collect();
        let pages = crate::sync::parallel_map(stored, self.config.max_in_flight, |placement| {
            match self.provider(&placement.endpoint).fetch_page(placement.page_id) {
                Ok(Some(bytes)) if bytes.len() as u64 == page_size => {
                    Ok((placement.page_index, bytes))
                }
                Ok(Some(bytes)) => Err(format!(
                    "page {} has length {}, expected {page_size}",
                    placement.page_index,
                    bytes.len()
                )),
                Ok(None) => Err(format!(
                    "page {} missing from provider {}",
                    placement.page_index, placement.provider_id
                )),
                Err(error) => Err(error.to_string()),
            }
        });
        let mut assembled = vec![0u8; size as usize];
        for result in pages {
            let (page_index, bytes) = result.map_err(ClientError::ReadFailed)?;
            let page_start = page_index * page_size;
            let copy_from = page_start.max(range.offset);
            let copy_to = (page_start + page_size).min(range.end());
            assembled[(copy_from - range.offset) as usize..(copy_to - range.offset) as usize]
                .copy_from_slice(
                    &bytes[(copy_from - page_start) as usize..(copy_to - page_start) as usize],
                );
        }
        let data = data_started.elapsed();
        Ok((assembled, OpStats { total: started.elapsed(), metadata, data }))
    }
}

/// Top-down walker over the predecessor version's tree, memoizing the
/// path nodes so the two boundary paths of a write cost O(depth) gets.
struct PrevTreeWalker<'a> {
    ring: &'a RingClient,
    descriptor: &'a BlockDescriptor,
    predecessor: Version,
    nodes: HashMap<crate::block::NodeKey, TreeNode>,
}

impl<'a> PrevTreeWalker<'a> {
    fn new(ring: &'a RingClient, descriptor: &'a BlockDescriptor, predecessor: Version) -> Self {
        PrevTreeWalker { ring, descriptor, predecessor, nodes: HashMap::new() }
    }

    fn fetch(&mut self, key: crate::block::NodeKey) -> Result<TreeNode, TreeError> {
        if let Some(node) = self.nodes.get(&key) {
            return Ok(node.clone());
        }
        let bytes = self
            .ring
            .get(key)
            .map_err(|e| TreeError::Fetch(e.to_string()))?
            .ok_or(TreeError::MetadataMissing { key })?;
        let node = decode_node(&bytes)?;
        self.nodes.insert(key, node.clone());
        Ok(node)
    }

    /// Key recorded for `target` in the predecessor tree; null when the
    /// predecessor never wrote that range.
    fn key_for(&mut self, target: ByteRange) -> Result<crate::block::NodeKey, TreeError> {
        if self.predecessor.0 == 0 {
            return Ok(crate::block::NULL_KEY);
        }
        let mut range = ByteRange::new(0, self.descriptor.adjusted_size);
        let mut key = crate::block::node_key(
            self.descriptor.block_id,
            range.offset,
            range.size,
            self.predecessor,
        );
        loop {
            if range == target {
                return Ok(key);
            }
            let node = self.fetch(key).map_err(|e| TreeError::PrevTreeUnavailable {
                offset: target.offset,
                size: target.size,
                reason: e.to_string(),
            })?;
            let NodeBody::Interior { left, right } = node.body else {
                return Err(TreeError::PrevTreeUnavailable {
                    offset: target.offset,
                    size: target.size,
                    reason: "descended into a leaf".to_string(),
                });
            };
            let half = range.size / 2;
            if target.offset < range.offset + half {
                key = left;
                range = ByteRange::new(range.offset, half);
            } else {
                key = right;
                range = ByteRange::new(range.offset + half, half);
            }
            if key.is_null() {
                // The predecessor never wrote under here.
                return Ok(crate::block::NULL_KEY);
            }
        }
    }
}
