//! Versioning manager: allocates blocks, hands out version numbers and
//! serializes write publication through a per-block FIFO queue.
//!
//! A write holds a ticket from `begin_write` until `complete_write` or
//! `abort_write`. Completion permission is granted strictly in version
//! order: `request_completion` parks until the ticket reaches the queue
//! head. Because grants and publishes follow queue order, every version
//! at or below `latest_published` is definitively resolved — published
//! or a permanent aborted hole — which is what gives readers stable
//! snapshots to descend from.
//!
//! A crashed client would wedge the queue forever, so the manager also
//! reaps: a head ticket that shows no progress within the auto-abort
//! timeout is aborted and the next ticket moves up.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::block::{BlockDescriptor, BlockId, Version};
use crate::transport::{Endpoint, Handler, RpcError, Transport};
use crate::wire::{self, ErrorCode, Reader, ServiceError};

/// How long a head ticket may sit without completing before the
/// manager aborts it on the writer's behalf.
pub const DEFAULT_AUTO_ABORT: Duration = Duration::from_secs(30);

#[derive(Clone, Copy, Debug)]
pub struct VmConfig {
    /// Seed for block id generation; `None` draws from the OS.
    pub seed: Option<u64>,
    pub auto_abort: Duration,
    pub sweep_interval: Duration,
}

impl Default for VmConfig {
    fn default() -> Self {
        VmConfig {
            seed: None,
            auto_abort: DEFAULT_AUTO_ABORT,
            sweep_interval: Duration::from_millis(500),
        }
    }
}

/// Protocol transition observed by the manager, in commit order.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum VmEvent {
    BlockCreated { block: BlockId },
    WriteBegun { block: BlockId, version: Version },
    CompletionGranted { block: BlockId, version: Version },
    Published { block: BlockId, version: Version },
    Aborted { block: BlockId, version: Version, auto: bool },
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum TicketState {
    Pending,
    Permitted,
}

struct Ticket {
    version: u64,
    state: TicketState,
}

struct BlockState {
    descriptor: BlockDescriptor,
    latest_published: u64,
    max_assigned: u64,
    pending: VecDeque<Ticket>,
    aborted: HashSet<u64>,
    head_version: Option<u64>,
    head_since: Instant,
}

impl BlockState {
    /// Re-derives who the head is after any queue mutation, restarting
    /// the idle clock when the head changes.
    fn refresh_head(&mut self) {
        let current = self.pending.front().map(|t| t.version);
        if current != self.head_version {
            self.head_version = current;
            self.head_since = Instant::now();
        }
    }
}

struct VmState {
    blocks: HashMap<BlockId, BlockState>,
    events: Vec<VmEvent>,
    rng: ChaCha8Rng,
}

pub struct VersioningService {
    state: Mutex<VmState>,
    queue_changed: Condvar,
    auto_abort: Duration,
}

impl VersioningService {
    pub fn new(config: VmConfig) -> Arc<Self> {
        let rng = match config.seed {
            Some(seed) => ChaCha8Rng::seed_from_u64(seed),
            None => ChaCha8Rng::from_rng(rand::thread_rng()).expect("seed from entropy"),
        };
        let service = Arc::new(VersioningService {
            state: Mutex::new(VmState { blocks: HashMap::new(), events: Vec::new(), rng }),
            queue_changed: Condvar::new(),
            auto_abort: config.auto_abort,
        });
        let sweeper = Arc::downgrade(&service);
        let interval = config.sweep_interval;
        std::thread::spawn(move || loop {
            std::thread::sleep(interval);
            match sweeper.upgrade() {
                Some(service) => service.sweep(),
                None => return,
            }
        });
        service
    }

    pub fn create_block(
        &self,
        page_size: u64,
        data_size: u64,
    ) -> Result<BlockDescriptor, ServiceError> {
        let mut state = self.state.lock();
        let block_id = loop {
            let mut raw = [0u8; 16];
            state.rng.fill_bytes(&mut raw);
            let id = BlockId::from_bytes(raw);
            if !state.blocks.contains_key(&id) {
                break id;
            }
        };
        let descriptor = BlockDescriptor::new(block_id, page_size, data_size)
            .map_err(|e| ServiceError::new(ErrorCode::InvalidGeometry, e.to_string()))?;
        state.blocks.insert(
            block_id,
            BlockState {
                descriptor,
                latest_published: 0,
                max_assigned: 0,
                pending: VecDeque::new(),
                aborted: HashSet::new(),
                head_version: None,
                head_since: Instant::now(),
            },
        );
        state.events.push(VmEvent::BlockCreated { block: block_id });
        Ok(descriptor)
    }

    pub fn latest(&self, block: BlockId) -> Result<(Version, BlockDescriptor), ServiceError> {
        let state = self.state.lock();
        let entry = state.blocks.get(&block).ok_or_else(|| unknown_block(block))?;
        Ok((Version(entry.latest_published), entry.descriptor))
    }

    /// `latest` plus a publication check for an explicit version.
    /// Version 0 counts as published by convention.
    pub fn check_version(
        &self,
        block: BlockId,
        version: Version,
    ) -> Result<(Version, BlockDescriptor, bool), ServiceError> {
        let state = self.state.lock();
        let entry = state.blocks.get(&block).ok_or_else(|| unknown_block(block))?;
        let published = version.0 <= entry.latest_published && !entry.aborted.contains(&version.0);
        Ok((Version(entry.latest_published), entry.descriptor, published))
    }

    pub fn begin_write(&self, block: BlockId) -> Result<Version, ServiceError> {
        let mut state = self.state.lock();
        let entry = state.blocks.get_mut(&block).ok_or_else(|| unknown_block(block))?;
        entry.max_assigned += 1;
        let version = entry.max_assigned;
        entry.pending.push_back(Ticket { version, state: TicketState::Pending });
        entry.refresh_head();
        state.events.push(VmEvent::WriteBegun { block, version: Version(version) });
        Ok(Version(version))
    }

    /// Parks until `version` reaches the queue head, then grants
    /// completion permission and returns the latest published
    /// predecessor the writer must reference.
    pub fn request_completion(
        &self,
        block: BlockId,
        version: Version,
    ) -> Result<Version, ServiceError> {
        let mut state = self.state.lock();
        loop {
            let entry = state.blocks.get_mut(&block).ok_or_else(|| unknown_block(block))?;
            if entry.aborted.contains(&version.0) {
                return Err(ServiceError::new(
                    ErrorCode::AbortedTicket,
                    format!("write {version} of block {block} was aborted"),
                ));
            }
            let Some(position) = entry.pending.iter().position(|t| t.version == version.0) else {
                return Err(ServiceError::new(
                    ErrorCode::UnknownTicket,
                    format!("no pending write {version} for block {block}"),
                ));
            };
            if position == 0 {
                entry.pending[0].state = TicketState::Permitted;
                // Fresh idle window for the granted writer.
                entry.head_since = Instant::now();
                let predecessor = Version(entry.latest_published);
                state.events.push(VmEvent::CompletionGranted { block, version });
                return Ok(predecessor);
            }
            self.queue_changed.wait(&mut state);
        }
    }

    pub fn complete_write(&self, block: BlockId, version: Version) -> Result<(), ServiceError> {
        let mut state = self.state.lock();
        let entry = state.blocks.get_mut(&block).ok_or_else(|| unknown_block(block))?;
        let permitted = entry
            .pending
            .front()
            .is_some_and(|t| t.version == version.0 && t.state == TicketState::Permitted);
        if !permitted {
            return Err(ServiceError::new(
                ErrorCode::NotPermitted,
                format!("write {version} of block {block} holds no completion permission"),
            ));
        }
        entry.pending.pop_front();
        entry.latest_published = version.0;
        entry.refresh_head();
        state.events.push(VmEvent::Published { block, version });
        self.queue_changed.notify_all();
        Ok(())
    }

    pub fn abort_write(&self, block: BlockId, version: Version) -> Result<(), ServiceError> {
        let mut state = self.state.lock();
        let entry = state.blocks.get_mut(&block).ok_or_else(|| unknown_block(block))?;
        let Some(position) = entry.pending.iter().position(|t| t.version == version.0) else {
            return Err(ServiceError::new(
                ErrorCode::UnknownTicket,
                format!("no pending write {version} for block {block}"),
            ));
        };
        entry.pending.remove(position);
        entry.aborted.insert(version.0);
        entry.refresh_head();
        state.events.push(VmEvent::Aborted { block, version, auto: false });
        self.queue_changed.notify_all();
        Ok(())
    }

    /// Aborts every head ticket that has sat idle longer than the
    /// auto-abort timeout.
    fn sweep(&self) {
        let now = Instant::now();
        let mut state = self.state.lock();
        let mut reaped = Vec::new();
        for (&block, entry) in state.blocks.iter_mut() {
            let Some(head) = entry.pending.front() else { continue };
            if now.duration_since(entry.head_since) > self.auto_abort {
                let version = head.version;
                entry.pending.pop_front();
                entry.aborted.insert(version);
                entry.refresh_head();
                reaped.push((block, version));
            }
        }
        if !reaped.is_empty() {
            for &(block, version) in &reaped {
                log::warn!("auto-aborting idle write {version} of block {block}");
                state.events.push(VmEvent::Aborted { block, version: Version(version), auto: true });
            }
            self.queue_changed.notify_all();
        }
    }

    /// Snapshot of the event log, in commit order.
    pub fn events(&self) -> Vec<VmEvent> {
        self.state.lock().events.clone()
    }

    pub fn pending_count(&self, block: BlockId) -> usize {
        self.state.lock().blocks.get(&block).map_or(0, |b| b.pending.len())
    }
}

fn unknown_block(block: BlockId) -> ServiceError {
    ServiceError::new(ErrorCode::UnknownBlock, format!("unknown block {block}"))
}

impl Handler for VersioningService {
    fn handle(&self, opcode: u8, payload: &[u8]) -> Result<Vec<u8>, ServiceError> {
        let mut reader = Reader::new(payload);
        match opcode {
            wire::OP_VM_CREATE => {
                let page_size = reader.u64()?;
                let data_size = reader.u64()?;
                reader.finish()?;
                let d = self.create_block(page_size, data_size)?;
                let mut out = Vec::with_capacity(40);
                out.extend_from_slice(&d.block_id.to_bytes());
                out.extend_from_slice(&d.page_size.to_be_bytes());
                out.extend_from_slice(&d.data_size.to_be_bytes());
                out.extend_from_slice(&d.adjusted_size.to_be_bytes());
                Ok(out)
            }
            wire::OP_VM_LATEST => {
                let block = BlockId::from_bytes(reader.bytes16()?);
                let check = reader.u8()?;
                let checked_version = if check != 0 { Some(Version(reader.u64()?)) } else { None };
                reader.finish()?;
                let (latest, descriptor, published) = match checked_version {
                    Some(version) => {
                        let (latest, descriptor, published) = self.check_version(block, version)?;
                        (latest, descriptor, Some(published))
                    }
                    None => {
                        let (latest, descriptor) = self.latest(block)?;
                        (latest, descriptor, None)
                    }
                };
                let mut out = Vec::with_capacity(33);
                out.extend_from_slice(&latest.0.to_be_bytes());
                out.extend_from_slice(&descriptor.page_size.to_be_bytes());
                out.extend_from_slice(&descriptor.data_size.to_be_bytes());
                out.extend_from_slice(&descriptor.adjusted_size.to_be_bytes());
                if let Some(published) = published {
                    out.push(published as u8);
                }
                Ok(out)
            }
            wire::OP_VM_BEGIN => {
                let block = BlockId::from_bytes(reader.bytes16()?);
                reader.finish()?;
                let version = self.begin_write(block)?;
                Ok(version.0.to_be_bytes().to_vec())
            }
            wire::OP_VM_REQUEST => {
                let block = BlockId::from_bytes(reader.bytes16()?);
                let version = Version(reader.u64()?);
                reader.finish()?;
                let predecessor = self.request_completion(block, version)?;
                Ok(predecessor.0.to_be_bytes().to_vec())
            }
            wire::OP_VM_COMPLETE => {
                let block = BlockId::from_bytes(reader.bytes16()?);
                let version = Version(reader.u64()?);
                reader.finish()?;
                self.complete_write(block, version)?;
                Ok(Vec::new())
            }
            wire::OP_VM_ABORT => {
                let block = BlockId::from_bytes(reader.bytes16()?);
                let version = Version(reader.u64()?);
                reader.finish()?;
                self.abort_write(block, version)?;
                Ok(Vec::new())
            }
            other => Err(ServiceError::unknown_opcode(other)),
        }
    }
}

// --- versioning client ---------------------------------------------------------

pub struct VersioningClient<'a> {
    pub transport: &'a dyn Transport,
    pub endpoint: &'a Endpoint,
    /// Timeout for non-blocking calls.
    pub timeout: Duration,
    /// Timeout for `request_completion`, which legitimately parks
    /// behind other writers.
    pub completion_timeout: Duration,
}

impl VersioningClient<'_> {
    pub fn create_block(
        &self,
        page_size: u64,
        data_size: u64,
    ) -> Result<BlockDescriptor, RpcError> {
        let mut request = Vec::with_capacity(16);
        request.extend_from_slice(&page_size.to_be_bytes());
        request.extend_from_slice(&data_size.to_be_bytes());
        let raw = self.transport.call(self.endpoint, wire::OP_VM_CREATE, &request, self.timeout)?;
        let mut reader = Reader::new(&raw);
        let block_id = BlockId::from_bytes(reader.bytes16().map_err(RpcError::Service)?);
        let page_size = reader.u64().map_err(RpcError::Service)?;
        let data_size = reader.u64().map_err(RpcError::Service)?;
        let adjusted = reader.u64().map_err(RpcError::Service)?;
        Ok(BlockDescriptor::from_parts(block_id, page_size, data_size, adjusted))
    }

    fn latest_inner(
        &self,
        block: BlockId,
        check: Option<Version>,
    ) -> Result<(Version, BlockDescriptor, Option<bool>), RpcError> {
        let mut request = Vec::with_capacity(25);
        request.extend_from_slice(&block.to_bytes());
        match check {
            Some(version) => {
                request.push(1);
                request.extend_from_slice(&version.0.to_be_bytes());
            }
            None => request.push(0),
        }
        let raw = self.transport.call(self.endpoint, wire::OP_VM_LATEST, &request, self.timeout)?;
        let mut reader = Reader::new(&raw);
        let latest = Version(reader.u64().map_err(RpcError::Service)?);
        let page_size = reader.u64().map_err(RpcError::Service)?;
        let data_size = reader.u64().map_err(RpcError::Service)?;
        let adjusted = reader.u64().map_err(RpcError::Service)?;
        let descriptor = BlockDescriptor::from_parts(block, page_size, data_size, adjusted);
        let published = match check {
            Some(_) => Some(reader.u8().map_err(RpcError::Service)? != 0),
            None => None,
        };
        Ok((latest, descriptor, published))
    }

    pub fn latest(&self, block: BlockId) -> Result<(Version, BlockDescriptor), RpcError> {
        let (latest, descriptor, _) = self.latest_inner(block, None)?;
        Ok((latest, descriptor))
    }

    pub fn check_version(
        &self,
        block: BlockId,
        version: Version,
    ) -> Result<(Version, BlockDescriptor, bool), RpcError> {
        let (latest, descriptor, published) = self.latest_inner(block, Some(version))?;
        Ok((latest, descriptor, published.unwrap_or(false)))
    }

    pub fn begin_write(&self, block: BlockId) -> Result<Version, RpcError> {
        let raw =
            self.transport.call(self.endpoint, wire::OP_VM_BEGIN, &block.to_bytes(), self.timeout)?;
        let mut reader = Reader::new(&raw);
        Ok(Version(reader.u64().map_err(RpcError::Service)?))
    }

    pub fn request_completion(&self, block: BlockId, version: Version) -> Result<Version, RpcError> {
        let mut request = Vec::with_capacity(24);
        request.extend_from_slice(&block.to_bytes());
        request.extend_from_slice(&version.0.to_be_bytes());
        let raw = self.transport.call(
            self.endpoint,
            wire::OP_VM_REQUEST,
            &request,
            self.completion_timeout,
        )?;
        let mut reader = Reader::new(&raw);
        Ok(Version(reader.u64().map_err(RpcError::Service)?))
    }

    pub fn complete_write(&self, block: BlockId, version: Version) -> Result<(), RpcError> {
        let mut request = Vec::with_capacity(24);
        request.extend_from_slice(&block.to_bytes());
        request.extend_from_slice(&version.0.to_be_bytes());
        self.transport.call(self.endpoint, wire::OP_VM_COMPLETE, &request, self.timeout)?;
        Ok(())
    }

    pub fn abort_write(&self, block: BlockId, version: Version) -> Result<(), RpcError> {
        let mut request = Vec::with_capacity(24);
        request.extend_from_slice(&block.to_bytes());
        request.extend_from_slice(&version.0.to_be_bytes());
        self.transport.call(self.endpoint, wire::OP_VM_ABORT, &request, self.timeout)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn service() -> Arc<VersioningService> {
        VersioningService::new(VmConfig {
            seed: Some(1),
            auto_abort: Duration::from_secs(60),
            sweep_interval: Duration::from_millis(20),
        })
    }

    #[test]
    fn create_block_geometry() {
        let vm = service();
        let d = vm.create_block(65536, 1 << 40).unwrap();
        assert_eq!(d.adjusted_size, 1 << 40);
        let single = vm.create_block(65536, 65536).unwrap();
        assert_eq!(single.leaf_count(), 1);
        let err = vm.create_block(3, 10).unwrap_err();
        assert_eq!(err.code, ErrorCode::InvalidGeometry);
    }

    #[test]
    fn latest_follows_publishes_and_skips_aborts() {
        let vm = service();
        let block = vm.create_block(4096, 16 * 4096).unwrap().block_id;
        assert_eq!(vm.latest(block).unwrap().0, Version(0));

        let v1 = vm.begin_write(block).unwrap();
        assert_eq!(vm.request_completion(block, v1).unwrap(), Version(0));
        vm.complete_write(block, v1).unwrap();
        assert_eq!(vm.latest(block).unwrap().0, Version(1));

        let v2 = vm.begin_write(block).unwrap();
        vm.request_completion(block, v2).unwrap();
        vm.complete_write(block, v2).unwrap();
        let v3 = vm.begin_write(block).unwrap();
        vm.abort_write(block, v3).unwrap();
        assert_eq!(vm.latest(block).unwrap().0, Version(2));

        // Published/aborted distinction for explicit reads.
        assert!(vm.check_version(block, Version(2)).unwrap().2);
        assert!(!vm.check_version(block, Version(3)).unwrap().2);
        assert!(!vm.check_version(block, Version(9)).unwrap().2);
        assert!(vm.check_version(block, Version(0)).unwrap().2);
    }

    #[test]
    fn begin_write_assigns_dense_versions() {
        let vm = service();
        let block = vm.create_block(4096, 4 * 4096).unwrap().block_id;
        let versions: Vec<Version> = crate::sync::parallel_map(
            (0..8).collect(),
            8,
            |_| vm.begin_write(block).unwrap(),
        );
        let mut sorted: Vec<u64> = versions.iter().map(|v| v.0).collect();
        sorted.sort_unstable();
        assert_eq!(sorted, (1..=8).collect::<Vec<u64>>());
        assert!(vm.begin_write(BlockId(999)).is_err());
    }

    #[test]
    fn completion_waits_for_queue_head() {
        let vm = service();
        let block = vm.create_block(4096, 4 * 4096).unwrap().block_id;
        let v1 = vm.begin_write(block).unwrap();
        let v2 = vm.begin_write(block).unwrap();

        let vm2 = vm.clone();
        let waiter = std::thread::spawn(move || vm2.request_completion(block, v2).unwrap());
        std::thread::sleep(Duration::from_millis(50));
        assert!(!waiter.is_finished(), "v2 must park behind v1");

        assert_eq!(vm.request_completion(block, v1).unwrap(), Version(0));
        vm.complete_write(block, v1).unwrap();
        assert_eq!(waiter.join().unwrap(), Version(1));
    }

    #[test]
    fn aborted_predecessor_is_skipped_in_grant() {
        let vm = service();
        let block = vm.create_block(4096, 4 * 4096).unwrap().block_id;
        let v1 = vm.begin_write(block).unwrap();
        let v2 = vm.begin_write(block).unwrap();
        vm.abort_write(block, v1).unwrap();
        assert_eq!(vm.request_completion(block, v2).unwrap(), Version(0));
        vm.complete_write(block, v2).unwrap();
        assert_eq!(vm.latest(block).unwrap().0, v2);
    }

    #[test]
    fn complete_before_permission_rejected() {
        let vm = service();
        let block = vm.create_block(4096, 4 * 4096).unwrap().block_id;
        let v1 = vm.begin_write(block).unwrap();
        let err = vm.complete_write(block, v1).unwrap_err();
        assert_eq!(err.code, ErrorCode::NotPermitted);
    }

    #[test]
    fn request_for_aborted_ticket_fails() {
        let vm = service();
        let block = vm.create_block(4096, 4 * 4096).unwrap().block_id;
        let v1 = vm.begin_write(block).unwrap();
        vm.abort_write(block, v1).unwrap();
        let err = vm.request_completion(block, v1).unwrap_err();
        assert_eq!(err.code, ErrorCode::AbortedTicket);
        let err = vm.abort_write(block, v1).unwrap_err();
        assert_eq!(err.code, ErrorCode::UnknownTicket);
    }

    #[test]
    fn waiter_is_released_when_its_ticket_is_aborted() {
        let vm = service();
        let block = vm.create_block(4096, 4 * 4096).unwrap().block_id;
        let _v1 = vm.begin_write(block).unwrap();
        let v2 = vm.begin_write(block).unwrap();
        let vm2 = vm.clone();
        let waiter = std::thread::spawn(move || vm2.request_completion(block, v2));
        std::thread::sleep(Duration::from_millis(30));
        vm.abort_write(block, v2).unwrap();
        assert_eq!(waiter.join().unwrap().unwrap_err().code, ErrorCode::AbortedTicket);
    }

    #[test]
    fn stalled_head_is_auto_aborted_and_queue_drains() {
        let vm = VersioningService::new(VmConfig {
            seed: Some(2),
            auto_abort: Duration::from_millis(80),
            sweep_interval: Duration::from_millis(10),
        });
        let block = vm.create_block(4096, 4 * 4096).unwrap().block_id;
        // The stalled client: begins, never requests or completes.
        let stalled = vm.begin_write(block).unwrap();
        // A live writer behind it.
        let live = vm.begin_write(block).unwrap();
        let predecessor = vm.request_completion(block, live).unwrap();
        assert_eq!(predecessor, Version(0));
        vm.complete_write(block, live).unwrap();
        assert_eq!(vm.latest(block).unwrap().0, live);
        assert_eq!(vm.pending_count(block), 0);
        let events = vm.events();
        assert!(events
            .contains(&VmEvent::Aborted { block, version: stalled, auto: true }));
    }

    #[test]
    fn publishes_follow_fifo_order_under_interleaving() {
        // Writers with skewed delays between begin and complete; publish
        // order must equal version order regardless.
        let vm = service();
        let block = vm.create_block(4096, 64 * 4096).unwrap().block_id;
        std::thread::scope(|scope| {
            for i in 0..6 {
                let vm = vm.clone();
                scope.spawn(move || {
                    for _ in 0..5 {
                        let version = vm.begin_write(block).unwrap();
                        std::thread::sleep(Duration::from_micros((i * 157) % 900));
                        vm.request_completion(block, version).unwrap();
                        vm.complete_write(block, version).unwrap();
                    }
                });
            }
        });
        let published: Vec<u64> = vm
            .events()
            .iter()
            .filter_map(|e| match e {
                VmEvent::Published { version, .. } => Some(version.0),
                _ => None,
            })
            .collect();
        assert_eq!(published, (1..=30).collect::<Vec<u64>>());
        let granted: Vec<u64> = vm
            .events()
            .iter()
            .filter_map(|e| match e {
                VmEvent::CompletionGranted { version, .. } => Some(version.0),
                _ => None,
            })
            .collect();
        assert_eq!(granted, (1..=30).collect::<Vec<u64>>());
    }
}
