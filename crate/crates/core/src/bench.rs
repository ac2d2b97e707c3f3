//! Benchmark harness behind the CLI: deploys a local constellation and
//! reproduces the two experiment series at desk scale, emitting CSV
//! with metadata-time/total-time splits and aggregated bandwidth.
//!
//! Every run verifies its data: each written segment is read back and
//! compared byte for byte; a run that timed wrong data is invalid and
//! aborts with an error. Bandwidth uses decimal megabytes (10^6 bytes
//! per MB).

use std::io::Write as _;
use std::sync::{Arc, Barrier};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::block::BlockId;
use crate::client::{Client, ClientError, OpStats};
use crate::deploy::{deploy_local, Constellation, DeployConfig, DeployError, Manifest};
use crate::transport::{InprocTransport, TcpTransport, Transport};
use crate::versioning::VmConfig;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum TransportKind {
    Inproc,
    Tcp,
}

impl TransportKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "inproc" => Some(TransportKind::Inproc),
            "tcp" => Some(TransportKind::Tcp),
            _ => None,
        }
    }
}

pub fn make_transport(kind: TransportKind, seed: u64) -> Arc<dyn Transport> {
    match kind {
        TransportKind::Inproc => Arc::new(InprocTransport::new(seed)),
        TransportKind::Tcp => Arc::new(TcpTransport::new()),
    }
}

/// Deterministic test data; verification regenerates the same stream.
pub fn fill_pattern(seed: u64, buffer: &mut [u8]) {
    let mut state = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    let mut chunks = buffer.chunks_exact_mut(8);
    for chunk in &mut chunks {
        state ^= state >> 12;
        state ^= state << 25;
        state ^= state >> 27;
        chunk.copy_from_slice(&state.wrapping_mul(0x2545_f491_4f6c_dd1d).to_le_bytes());
    }
    for (i, byte) in chunks.into_remainder().iter_mut().enumerate() {
        *byte = (state >> (8 * (i % 8))) as u8;
    }
}

pub fn pattern(seed: u64, len: usize) -> Vec<u8> {
    let mut buffer = vec![0u8; len];
    fill_pattern(seed, &mut buffer);
    buffer
}

// --- CSV ----------------------------------------------------------------------

pub const CSV_HEADER: &str = "experiment,segment_size,clients,metadata_providers,data_providers,\
total_ms,metadata_ms,data_ms,bandwidth_MBps,repetition";

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub experiment: String,
    pub segment_size: u64,
    pub clients: usize,
    pub metadata_providers: usize,
    pub data_providers: usize,
    pub total_ms: f64,
    pub metadata_ms: f64,
    pub data_ms: f64,
    pub bandwidth_mbps: f64,
    pub repetition: usize,
}

impl BenchRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3},{:.3},{:.3},{:.3},{}",
            self.experiment,
            self.segment_size,
            self.clients,
            self.metadata_providers,
            self.data_providers,
            self.total_ms,
            self.metadata_ms,
            self.data_ms,
            self.bandwidth_mbps,
            self.repetition
        )
    }
}

/// Writes header plus rows; an aborted run is flagged with a trailing
/// `# incomplete` comment line.
pub fn write_csv(
    path: &std::path::Path,
    rows: &[BenchRow],
    incomplete: Option<&str>,
) -> std::io::Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "{CSV_HEADER}")?;
    for row in rows {
        writeln!(file, "{}", row.csv_line())?;
    }
    if let Some(reason) = incomplete {
        writeln!(file, "# incomplete: {}", reason.replace('\n', " "))?;
    }
    Ok(())
}

fn mbps(bytes: u64, elapsed: Duration) -> f64 {
    bytes as f64 / 1e6 / elapsed.as_secs_f64().max(1e-9)
}

fn ms(duration: Duration) -> f64 {
    duration.as_secs_f64() * 1e3
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("deploy failed: {0}")]
    Deploy(#[from] DeployError),
    #[error("client operation failed: {0}")]
    Client(#[from] ClientError),
    #[error("verification failed: {0}")]
    Verify(String),
    #[error("worker failed: {0}")]
    Worker(String),
}

/// Rows gathered before a failure, if any.
pub struct BenchOutcome {
    pub rows: Vec<BenchRow>,
    pub error: Option<BenchError>,
}

// --- single-client series -------------------------------------------------------

#[derive(Clone, Debug)]
pub struct SingleBenchParams {
    pub page_size: u64,
    pub block_size: u64,
    /// First written range size; doubles until `segment_end`.
    pub segment_start: u64,
    pub segment_end: u64,
    pub repetitions: usize,
    /// Gateway counts to sweep.
    pub metadata_sweep: Vec<usize>,
    pub data_providers: usize,
    pub capacity_per_provider: u64,
    pub seed: u64,
}

impl Default for SingleBenchParams {
    fn default() -> Self {
        SingleBenchParams {
            page_size: 64 << 10,
            block_size: 1 << 30,
            segment_start: 1 << 20,
            segment_end: 64 << 20,
            repetitions: 3,
            metadata_sweep: vec![1, 4, 16],
            data_providers: 8,
            capacity_per_provider: crate::provider::DEFAULT_CAPACITY,
            seed: 1,
        }
    }
}

fn deploy_for_bench(
    kind: TransportKind,
    params_seed: u64,
    data_providers: usize,
    metadata_providers: usize,
    capacity: u64,
) -> Result<(Constellation, Arc<dyn Transport>), DeployError> {
    let constellation_transport = make_transport(kind, params_seed);
    let config = DeployConfig {
        capacity_per_provider: capacity,
        vm: VmConfig { seed: Some(params_seed), ..VmConfig::default() },
        listen_host: "127.0.0.1".to_string(),
        ..DeployConfig::new(data_providers, metadata_providers)
    };
    let constellation = deploy_local(constellation_transport.clone(), config)?;
    // TCP clients open their own sockets; in-process clients must share
    // the constellation's registry.
    let client_transport: Arc<dyn Transport> = match kind {
        TransportKind::Tcp => Arc::new(TcpTransport::new()),
        TransportKind::Inproc => constellation_transport,
    };
    Ok((constellation, client_transport))
}

/// One client writes a doubling series of segments, then reads each
/// back, for every gateway count in the sweep.
pub fn run_bench_single(kind: TransportKind, params: &SingleBenchParams) -> BenchOutcome {
    let mut rows = Vec::new();
    match run_bench_single_inner(kind, params, &mut rows) {
        Ok(()) => BenchOutcome { rows, error: None },
        Err(error) => BenchOutcome { rows, error: Some(error) },
    }
}

fn single_fill_seed(seed: u64, repetition: usize, segment: u64) -> u64 {
    seed ^ ((repetition as u64 + 1) << 40).wrapping_add(segment)
}

fn run_bench_single_inner(
    kind: TransportKind,
    params: &SingleBenchParams,
    rows: &mut Vec<BenchRow>,
) -> Result<(), BenchError> {
    for &gateway_count in &params.metadata_sweep {
        let (constellation, transport) = deploy_for_bench(
            kind,
            params.seed,
            params.data_providers,
            gateway_count,
            params.capacity_per_provider,
        )?;
        let mut config = constellation.client_config();
        config.seed = Some(params.seed);
        let client = Client::new(transport, config);
        let block = client.alloc(params.page_size, params.block_size)?;

        for repetition in 0..params.repetitions {
            // Write series: doubling segments at consecutive offsets.
            let mut offset = 0u64;
            let mut segment = params.segment_start;
            while segment <= params.segment_end {
                let fill_seed = single_fill_seed(params.seed, repetition, segment);
                let buffer = pattern(fill_seed, segment as usize);
                let (_, stats) = client.write_timed(block, &buffer, offset)?;
                rows.push(BenchRow {
                    experiment: "single-write".to_string(),
                    segment_size: segment,
                    clients: 1,
                    metadata_providers: gateway_count,
                    data_providers: params.data_providers,
                    total_ms: ms(stats.total),
                    metadata_ms: ms(stats.metadata),
                    data_ms: ms(stats.data),
                    bandwidth_mbps: mbps(segment, stats.total),
                    repetition,
                });
                offset += segment;
                segment *= 2;
            }

            // Read-back series over the same consecutive segments, with
            // byte-for-byte verification.
            let mut offset = 0u64;
            let mut segment = params.segment_start;
            while segment <= params.segment_end {
                let fill_seed = single_fill_seed(params.seed, repetition, segment);
                let (bytes, stats) = client.read_timed(block, None, offset, segment)?;
                if bytes != pattern(fill_seed, segment as usize) {
                    return Err(BenchError::Verify(format!(
                        "segment at offset {offset} read back different bytes"
                    )));
                }
                rows.push(BenchRow {
                    experiment: "single-read".to_string(),
                    segment_size: segment,
                    clients: 1,
                    metadata_providers: gateway_count,
                    data_providers: params.data_providers,
                    total_ms: ms(stats.total),
                    metadata_ms: ms(stats.metadata),
                    data_ms: ms(stats.data),
                    bandwidth_mbps: mbps(segment, stats.total),
                    repetition,
                });
                offset += segment;
                segment *= 2;
            }
        }
        constellation.shutdown();
    }
    Ok(())
}

// --- concurrent series -----------------------------------------------------------

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum AccessMode {
    Read,
    Write,
}

impl AccessMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "read" => Some(AccessMode::Read),
            "write" => Some(AccessMode::Write),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConcurrentBenchParams {
    pub page_size: u64,
    /// Per-client range size; client i covers offset i * segment.
    pub segment: u64,
    pub clients_sweep: Vec<usize>,
    pub mode: AccessMode,
    pub repetitions: usize,
    pub data_providers: usize,
    pub metadata_providers: usize,
    pub capacity_per_provider: u64,
    pub seed: u64,
}

impl Default for ConcurrentBenchParams {
    fn default() -> Self {
        ConcurrentBenchParams {
            page_size: 64 << 10,
            segment: 64 << 20,
            clients_sweep: vec![1, 2, 4],
            mode: AccessMode::Read,
            repetitions: 1,
            data_providers: 8,
            metadata_providers: 4,
            capacity_per_provider: crate::provider::DEFAULT_CAPACITY,
            seed: 1,
        }
    }
}

/// How the k concurrent clients run: as plain threads, or as real OS
/// processes invoking `<exe> bench-worker` (TCP transport only).
#[derive(Clone, Debug)]
pub enum WorkerMode {
    Threads,
    Processes { exe: std::path::PathBuf },
}

/// What one worker does, serialized to out-of-process workers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WorkerSpec {
    pub manifest: Manifest,
    pub mode: AccessMode,
    pub block_id: String,
    pub offset: u64,
    pub size: u64,
    pub fill_seed: u64,
    pub page_seed: u64,
    /// host:port of the start barrier (processes only).
    pub barrier: Option<String>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct WorkerResult {
    pub elapsed_ms: f64,
    pub metadata_ms: f64,
    pub data_ms: f64,
}

/// Runs the spec's timed operation. The caller is responsible for
/// start synchronization.
pub fn run_worker_op(client: &Client, spec: &WorkerSpec) -> Result<WorkerResult, BenchError> {
    let block = BlockId::parse_hex(&spec.block_id)
        .ok_or_else(|| BenchError::Worker(format!("bad block id {}", spec.block_id)))?;
    let started = Instant::now();
    let stats: OpStats = match spec.mode {
        AccessMode::Write => {
            let buffer = pattern(spec.fill_seed, spec.size as usize);
            let (_, stats) = client.write_timed(block, &buffer, spec.offset)?;
            stats
        }
        AccessMode::Read => {
            let (bytes, stats) = client.read_timed(block, None, spec.offset, spec.size)?;
            if bytes != pattern(spec.fill_seed, spec.size as usize) {
                return Err(BenchError::Verify(format!(
                    "range at offset {} read back different bytes",
                    spec.offset
                )));
            }
            stats
        }
    };
    Ok(WorkerResult {
        elapsed_ms: ms(started.elapsed()),
        metadata_ms: ms(stats.metadata),
        data_ms: ms(stats.data),
    })
}

/// Aggregated observation for one (k, repetition) point.
#[derive(Clone, Debug)]
pub struct ConcurrencyPoint {
    pub clients: usize,
    pub repetition: usize,
    pub per_client_mbps: Vec<f64>,
    pub aggregate_mbps: f64,
    pub ideal_mbps: f64,
}

pub struct ConcurrentOutcome {
    pub rows: Vec<BenchRow>,
    pub points: Vec<ConcurrencyPoint>,
    pub error: Option<BenchError>,
}

/// Concurrent scaling series: k synchronized clients on disjoint
/// ranges, with the ideal baseline taken from the k = 1 measurement of
/// the same repetition.
pub fn run_bench_concurrent(
    kind: TransportKind,
    params: &ConcurrentBenchParams,
    workers: WorkerMode,
) -> ConcurrentOutcome {
    let mut rows = Vec::new();
    let mut points = Vec::new();
    match run_bench_concurrent_inner(kind, params, workers, &mut rows, &mut points) {
        Ok(()) => ConcurrentOutcome { rows, points, error: None },
        Err(error) => ConcurrentOutcome { rows, points, error: Some(error) },
    }
}

fn run_bench_concurrent_inner(
    kind: TransportKind,
    params: &ConcurrentBenchParams,
    workers: WorkerMode,
    rows: &mut Vec<BenchRow>,
    points: &mut Vec<ConcurrencyPoint>,
) -> Result<(), BenchError> {
    let max_clients = params.clients_sweep.iter().copied().max().unwrap_or(1);
    let block_size = params.segment * max_clients as u64;
    let (constellation, transport) = deploy_for_bench(
        kind,
        params.seed,
        params.data_providers,
        params.metadata_providers,
        params.capacity_per_provider,
    )?;
    let mut config = constellation.client_config();
    config.seed = Some(params.seed);
    let control = Client::new(transport.clone(), config);
    let block = control.alloc(params.page_size, block_size)?;

    // Reads need the data in place first.
    if params.mode == AccessMode::Read {
        for i in 0..max_clients as u64 {
            let buffer = pattern(read_fill_seed(params.seed, i), params.segment as usize);
            control.write(block, &buffer, i * params.segment)?;
        }
    }

    let manifest = constellation.manifest();
    for repetition in 0..params.repetitions.max(1) {
        let mut baseline_mbps: Option<f64> = None;
        let sweep = with_leading_one(&params.clients_sweep);
        for (k, emit) in sweep {
            let specs: Vec<WorkerSpec> = (0..k as u64)
                .map(|i| WorkerSpec {
                    manifest: manifest.clone(),
                    mode: params.mode,
                    block_id: block.to_string(),
                    offset: i * params.segment,
                    size: params.segment,
                    fill_seed: match params.mode {
                        AccessMode::Read => read_fill_seed(params.seed, i),
                        AccessMode::Write => params
                            .seed
                            .wrapping_mul(31)
                            .wrapping_add((repetition as u64) << 32)
                            .wrapping_add((k as u64) << 16)
                            .wrapping_add(i),
                    },
                    page_seed: params.seed ^ (i + 1),
                    barrier: None,
                })
                .collect();
            let results = match &workers {
                WorkerMode::Threads => {
                    run_workers_as_threads(kind, &constellation, transport.clone(), &specs)?
                }
                WorkerMode::Processes { exe } => run_workers_as_processes(exe, &specs)?,
            };

            // Writes are verified after the timed window.
            if params.mode == AccessMode::Write {
                for spec in &specs {
                    let bytes = control.read(block, None, spec.offset, spec.size)?;
                    if bytes != pattern(spec.fill_seed, spec.size as usize) {
                        return Err(BenchError::Verify(format!(
                            "written range at offset {} read back different bytes",
                            spec.offset
                        )));
                    }
                }
            }

            let wall_ms =
                results.iter().map(|r| r.elapsed_ms).fold(0.0f64, f64::max).max(1e-6);
            let aggregate =
                (params.segment * k as u64) as f64 / 1e6 / (wall_ms / 1e3);
            let per_client: Vec<f64> = results
                .iter()
                .map(|r| params.segment as f64 / 1e6 / (r.elapsed_ms.max(1e-6) / 1e3))
                .collect();
            if k == 1 {
                baseline_mbps = Some(aggregate);
            }
            if !emit {
                continue;
            }
            let ideal = baseline_mbps.unwrap_or(aggregate) * k as f64;
            let experiment = match params.mode {
                AccessMode::Read => "concurrent-read",
                AccessMode::Write => "concurrent-write",
            };
            let slowest = results
                .iter()
                .max_by(|a, b| a.elapsed_ms.total_cmp(&b.elapsed_ms))
                .copied()
                .unwrap_or(WorkerResult { elapsed_ms: 0.0, metadata_ms: 0.0, data_ms: 0.0 });
            for (i, result) in results.iter().enumerate() {
                rows.push(BenchRow {
                    experiment: format!("{experiment}-client"),
                    segment_size: params.segment,
                    clients: k,
                    metadata_providers: params.metadata_providers,
                    data_providers: params.data_providers,
                    total_ms: result.elapsed_ms,
                    metadata_ms: result.metadata_ms,
                    data_ms: result.data_ms,
                    bandwidth_mbps: per_client[i],
                    repetition,
                });
            }
            rows.push(BenchRow {
                experiment: format!("{experiment}-aggregate"),
                segment_size: params.segment,
                clients: k,
                metadata_providers: params.metadata_providers,
                data_providers: params.data_providers,
                total_ms: wall_ms,
                metadata_ms: slowest.metadata_ms,
                data_ms: slowest.data_ms,
                bandwidth_mbps: aggregate,
                repetition,
            });
            rows.push(BenchRow {
                experiment: format!("{experiment}-ideal"),
                segment_size: params.segment,
                clients: k,
                metadata_providers: params.metadata_providers,
                data_providers: params.data_providers,
                total_ms: 0.0,
                metadata_ms: 0.0,
                data_ms: 0.0,
                bandwidth_mbps: ideal,
                repetition,
            });
            points.push(ConcurrencyPoint {
                clients: k,
                repetition,
                per_client_mbps: per_client,
                aggregate_mbps: aggregate,
                ideal_mbps: ideal,
            });
        }
    }
    constellation.shutdown();
    Ok(())
}

fn read_fill_seed(seed: u64, range_index: u64) -> u64 {
    seed.wrapping_mul(977).wrapping_add(range_index)
}

/// Ensures a k = 1 point is measured first for the ideal baseline; the
/// bool marks whether the point is part of the requested sweep.
fn with_leading_one(sweep: &[usize]) -> Vec<(usize, bool)> {
    let mut out = Vec::new();
    if sweep.first() != Some(&1) {
        out.push((1, sweep.contains(&1)));
    }
    for &k in sweep {
        if k == 1 && !out.is_empty() && out[0].0 == 1 {
            if !out[0].1 {
                out[0].1 = true;
            }
            continue;
        }
        out.push((k, true));
    }
    out
}

fn run_workers_as_threads(
    kind: TransportKind,
    constellation: &Constellation,
    shared_transport: Arc<dyn Transport>,
    specs: &[WorkerSpec],
) -> Result<Vec<WorkerResult>, BenchError> {
    let barrier = Barrier::new(specs.len());
    let results: Vec<Result<WorkerResult, BenchError>> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for spec in specs {
            let barrier = &barrier;
            // Every TCP worker gets its own sockets, like a separate
            // process would; in-process workers share the registry.
            let transport: Arc<dyn Transport> = match kind {
                TransportKind::Tcp => Arc::new(TcpTransport::new()),
                TransportKind::Inproc => shared_transport.clone(),
            };
            let mut config = constellation.client_config();
            config.seed = Some(spec.page_seed);
            handles.push(scope.spawn(move || {
                let client = Client::new(transport, config);
                // Resolve the descriptor before the timed window, like a
                // process that has already opened the block.
                barrier.wait();
                run_worker_op(&client, spec)
            }));
        }
        handles.into_iter().map(|h| h.join().expect("worker thread panicked")).collect()
    });
    results.into_iter().collect()
}

fn run_workers_as_processes(
    exe: &std::path::Path,
    specs: &[WorkerSpec],
) -> Result<Vec<WorkerResult>, BenchError> {
    use std::io::Read as _;
    use std::net::TcpListener;

    let listener = TcpListener::bind(("127.0.0.1", 0))
        .map_err(|e| BenchError::Worker(format!("barrier bind: {e}")))?;
    let barrier_addr = listener
        .local_addr()
        .map_err(|e| BenchError::Worker(format!("barrier addr: {e}")))?
        .to_string();

    let mut children = Vec::new();
    for spec in specs {
        let mut spec = spec.clone();
        spec.barrier = Some(barrier_addr.clone());
        let json = serde_json::to_string(&spec)
            .map_err(|e| BenchError::Worker(format!("spec encode: {e}")))?;
        let child = std::process::Command::new(exe)
            .arg("bench-worker")
            .arg("--spec")
            .arg(json)
            .stdout(std::process::Stdio::piped())
            .stderr(std::process::Stdio::piped())
            .spawn()
            .map_err(|e| BenchError::Worker(format!("spawn {}: {e}", exe.display())))?;
        children.push(child);
    }

    // Barrier: collect one "ready" byte from each worker, then release
    // them all at once. Polling keeps a crashed worker from wedging the
    // accept loop.
    listener
        .set_nonblocking(true)
        .map_err(|e| BenchError::Worker(format!("barrier nonblocking: {e}")))?;
    let mut ready = Vec::new();
    while ready.len() < specs.len() {
        match listener.accept() {
            Ok((mut stream, _)) => {
                stream
                    .set_nonblocking(false)
                    .map_err(|e| BenchError::Worker(format!("barrier stream: {e}")))?;
                let mut byte = [0u8; 1];
                stream
                    .read_exact(&mut byte)
                    .map_err(|e| BenchError::Worker(format!("barrier ready: {e}")))?;
                ready.push(stream);
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                for child in &mut children {
                    if let Ok(Some(status)) = child.try_wait() {
                        if !status.success() {
                            return Err(BenchError::Worker(format!(
                                "worker exited with {status} before the barrier"
                            )));
                        }
                    }
                }
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(BenchError::Worker(format!("barrier accept: {e}"))),
        }
    }
    for stream in &mut ready {
        stream
            .write_all(b"G")
            .map_err(|e| BenchError::Worker(format!("barrier release: {e}")))?;
    }

    let mut results = Vec::new();
    for child in children {
        let output = child
            .wait_with_output()
            .map_err(|e| BenchError::Worker(format!("worker wait: {e}")))?;
        if !output.status.success() {
            return Err(BenchError::Worker(format!(
                "worker exited with {}: {}",
                output.status,
                String::from_utf8_lossy(&output.stderr)
            )));
        }
        let stdout = String::from_utf8_lossy(&output.stdout);
        let line = stdout.lines().last().unwrap_or_default();
        let result: WorkerResult = serde_json::from_str(line)
            .map_err(|e| BenchError::Worker(format!("bad worker output {line:?}: {e}")))?;
        results.push(result);
    }
    Ok(results)
}
