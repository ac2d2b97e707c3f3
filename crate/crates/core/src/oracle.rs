//! Randomized snapshot verification against a flat-buffer oracle.
//!
//! A script deploys a fresh constellation, lets a handful of concurrent
//! clients race aligned writes through the seeded shuffling transport,
//! then replays the published writes in publication order into a
//! zero-initialized flat buffer. Every published version must read back
//! byte-for-byte as the oracle's state at that point, including old
//! versions after newer ones published.

use std::sync::Arc;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bench::{fill_pattern, make_transport, TransportKind};
use crate::block::Version;
use crate::deploy::{deploy_local, DeployConfig};
use crate::transport::InprocTransport;
use crate::versioning::{VmConfig, VmEvent};

/// Zero-initialized reference buffer; applies writes in publication
/// order.
pub struct FlatOracle {
    data: Vec<u8>,
}

impl FlatOracle {
    pub fn new(size: u64) -> Self {
        FlatOracle { data: vec![0u8; size as usize] }
    }

    pub fn apply(&mut self, offset: u64, bytes: &[u8]) {
        self.data[offset as usize..offset as usize + bytes.len()].copy_from_slice(bytes);
    }

    pub fn range(&self, offset: u64, size: u64) -> &[u8] {
        &self.data[offset as usize..(offset + size) as usize]
    }
}

#[derive(Clone, Debug)]
pub struct VerifyParams {
    pub scripts: usize,
    pub max_clients: usize,
    pub writes_per_client: usize,
    pub max_pages_per_write: u64,
    pub page_size: u64,
    pub block_size: u64,
    pub data_providers: usize,
    pub metadata_providers: usize,
    pub shuffle_delay_micros: u64,
    pub transport: TransportKind,
    pub seed: u64,
}

impl Default for VerifyParams {
    fn default() -> Self {
        VerifyParams {
            scripts: 25,
            max_clients: 8,
            writes_per_client: 3,
            max_pages_per_write: 32,
            page_size: 4096,
            block_size: 16 << 20,
            data_providers: 4,
            metadata_providers: 4,
            shuffle_delay_micros: 50,
            transport: TransportKind::Inproc,
            seed: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct VerifyReport {
    pub scripts: usize,
    pub versions_checked: usize,
    pub reads_checked: usize,
}

struct WriteRecord {
    version: Version,
    offset: u64,
    bytes: Vec<u8>,
}

/// Runs all scripts; the first byte-level divergence aborts with a
/// description of where it happened.
pub fn run_snapshot_verification(params: &VerifyParams) -> Result<VerifyReport, String> {
    let mut report = VerifyReport::default();
    for script in 0..params.scripts {
        let stats = run_script(params, script)?;
        report.scripts += 1;
        report.versions_checked += stats.0;
        report.reads_checked += stats.1;
    }
    Ok(report)
}

fn run_script(params: &VerifyParams, script: usize) -> Result<(usize, usize), String> {
    let script_seed = params.seed.wrapping_add(script as u64).wrapping_mul(0x9e37_79b9);
    let mut rng = ChaCha8Rng::seed_from_u64(script_seed);

    let transport: Arc<dyn crate::transport::Transport> = match params.transport {
        TransportKind::Inproc => Arc::new(
            InprocTransport::new(script_seed).with_delivery_shuffle(params.shuffle_delay_micros),
        ),
        TransportKind::Tcp => make_transport(TransportKind::Tcp, script_seed),
    };
    let config = DeployConfig {
        capacity_per_provider: 4 * params.block_size,
        vm: VmConfig { seed: Some(script_seed), ..VmConfig::default() },
        ..DeployConfig::new(params.data_providers, params.metadata_providers)
    };
    let constellation =
        deploy_local(transport, config).map_err(|e| format!("script {script}: deploy: {e}"))?;

    let block = constellation
        .client(Some(script_seed))
        .alloc(params.page_size, params.block_size)
        .map_err(|e| format!("script {script}: alloc: {e}"))?;

    // Concurrent writers race aligned writes; the transport shuffles
    // delivery, the versioning manager serializes publication.
    let client_count = rng.gen_range(1..=params.max_clients);
    let page_count = params.block_size / params.page_size;
    let records: Mutex<Vec<WriteRecord>> = Mutex::new(Vec::new());
    let failure: Mutex<Option<String>> = Mutex::new(None);
    std::thread::scope(|scope| {
        for writer in 0..client_count {
            let writer_seed = script_seed ^ ((writer as u64 + 1) << 32);
            let client = constellation.client(Some(writer_seed));
            let records = &records;
            let failure = &failure;
            let params = &params;
            scope.spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(writer_seed);
                for write in 0..params.writes_per_client {
                    let pages = rng.gen_range(1..=params.max_pages_per_write.min(page_count));
                    let first = rng.gen_range(0..=page_count - pages);
                    let offset = first * params.page_size;
                    let mut bytes = vec![0u8; (pages * params.page_size) as usize];
                    fill_pattern(writer_seed.wrapping_add(write as u64), &mut bytes);
                    match client.write(block, &bytes, offset) {
                        Ok(version) => {
                            records.lock().push(WriteRecord { version, offset, bytes })
                        }
                        Err(error) => {
                            *failure.lock() =
                                Some(format!("script {script} writer {writer}: {error}"));
                            return;
                        }
                    }
                }
            });
        }
    });
    if let Some(error) = failure.into_inner() {
        return Err(error);
    }

    // Publication order from the manager's event log; with no faults
    // injected every write must have published, in version order.
    let published: Vec<Version> = constellation
        .vm_events()
        .iter()
        .filter_map(|event| match event {
            VmEvent::Published { block: b, version } if *b == block => Some(*version),
            _ => None,
        })
        .collect();
    let records = records.into_inner();
    if published.len() != records.len() {
        return Err(format!(
            "script {script}: {} writes returned but {} published",
            records.len(),
            published.len()
        ));
    }
    for window in published.windows(2) {
        if window[0] >= window[1] {
            return Err(format!("script {script}: publication order not increasing"));
        }
    }

    let reader = constellation.client(None);
    let mut oracle = FlatOracle::new(params.block_size);
    let mut versions_checked = 0usize;
    let mut reads_checked = 0usize;
    let check = |version: Version,
                     oracle: &FlatOracle,
                     rng: &mut ChaCha8Rng,
                     reads_checked: &mut usize|
     -> Result<(), String> {
        for _ in 0..3 {
            let offset = rng.gen_range(0..params.block_size);
            let size = rng.gen_range(1..=(params.block_size - offset).min(32 * params.page_size));
            let bytes = reader
                .read(block, Some(version), offset, size)
                .map_err(|e| format!("script {script}: read v{version} ({offset},{size}): {e}"))?;
            if bytes != oracle.range(offset, size) {
                return Err(format!(
                    "script {script}: v{version} range ({offset},{size}) diverges from oracle"
                ));
            }
            *reads_checked += 1;
        }
        Ok(())
    };

    // Version 0 reads as zeros.
    check(Version(0), &oracle, &mut rng, &mut reads_checked)?;
    versions_checked += 1;

    for version in &published {
        let record = records
            .iter()
            .find(|r| r.version == *version)
            .expect("published version has a matching record");
        oracle.apply(record.offset, &record.bytes);
        check(*version, &oracle, &mut rng, &mut reads_checked)?;
        versions_checked += 1;
    }

    // The latest version in full.
    if let Some(latest) = published.last() {
        let bytes = reader
            .read(block, Some(*latest), 0, params.block_size)
            .map_err(|e| format!("script {script}: full read: {e}"))?;
        if bytes != oracle.range(0, params.block_size) {
            return Err(format!("script {script}: full read at v{latest} diverges"));
        }
        reads_checked += 1;
    }

    // Snapshot immutability: an old version re-read after everything
    // published must still match its prefix replay.
    if published.len() >= 2 {
        let pick = rng.gen_range(0..published.len() - 1);
        let old = published[pick];
        let mut prefix = FlatOracle::new(params.block_size);
        for version in &published[..=pick] {
            let record = records.iter().find(|r| r.version == *version).unwrap();
            prefix.apply(record.offset, &record.bytes);
        }
        check(old, &prefix, &mut rng, &mut reads_checked)?;
    }

    constellation.shutdown();
    Ok((versions_checked, reads_checked))
}
