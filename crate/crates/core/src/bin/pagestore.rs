//! Command-line harness: deploy a local constellation, poke it with
//! alloc/write/read, verify snapshot semantics, and run the benchmark
//! series.

use std::io::{Read as _, Write as _};
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use pagestore::bench::{
    self, run_bench_concurrent, run_bench_single, write_csv, AccessMode, ConcurrentBenchParams,
    SingleBenchParams, TransportKind, WorkerMode, WorkerSpec,
};
use pagestore::block::Version;
use pagestore::client::Client;
use pagestore::deploy::{deploy_local, DeployConfig, Manifest};
use pagestore::oracle::{run_snapshot_verification, VerifyParams};
use pagestore::versioning::VmConfig;
use pagestore::{BlockId, TcpTransport};

#[derive(Parser)]
#[command(name = "pagestore", version, about = "Distributed versioned page blob store")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start a local constellation over TCP and write its manifest.
    Deploy {
        #[arg(long, default_value_t = 8)]
        data_providers: usize,
        #[arg(long, default_value_t = 4)]
        metadata_providers: usize,
        /// RAM budget per data provider, bytes.
        #[arg(long, default_value_t = 256 << 20)]
        capacity: u64,
        #[arg(long, default_value = "constellation.json")]
        manifest: PathBuf,
        /// Exit after this many seconds (runs until killed otherwise).
        #[arg(long)]
        duration: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Allocate a block and print its id.
    Alloc {
        #[arg(long, default_value = "constellation.json")]
        manifest: PathBuf,
        #[arg(long, default_value_t = 64 << 10)]
        page_size: u64,
        #[arg(long, default_value_t = 1 << 30)]
        block_size: u64,
    },
    /// Write a range; data comes from a file or a seeded pattern.
    Write {
        #[arg(long, default_value = "constellation.json")]
        manifest: PathBuf,
        #[arg(long)]
        block_id: String,
        #[arg(long, default_value_t = 0)]
        offset: u64,
        /// File with the bytes to write.
        #[arg(long, conflicts_with = "size")]
        input: Option<PathBuf>,
        /// Generate this many pattern bytes instead of reading a file.
        #[arg(long)]
        size: Option<u64>,
        #[arg(long, default_value_t = 0)]
        fill_seed: u64,
    },
    /// Read a range to a file (or summarize it on stdout).
    Read {
        #[arg(long, default_value = "constellation.json")]
        manifest: PathBuf,
        #[arg(long)]
        block_id: String,
        #[arg(long, default_value_t = 0)]
        offset: u64,
        #[arg(long)]
        size: u64,
        /// Read this version instead of the latest.
        #[arg(long)]
        version: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Race randomized concurrent writes against a flat-buffer oracle.
    Verify {
        #[arg(long, default_value = "inproc")]
        transport: String,
        #[arg(long, default_value_t = 25)]
        scripts: usize,
        #[arg(long, default_value_t = 8)]
        clients: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Single-client doubling-segment series over a gateway-count sweep.
    BenchSingle {
        #[arg(long, default_value = "tcp")]
        transport: String,
        #[arg(long, default_value_t = 8)]
        data_providers: usize,
        /// Comma-separated gateway counts to sweep.
        #[arg(long, default_value = "1,4,16")]
        metadata_providers: String,
        #[arg(long, default_value_t = 64 << 10)]
        page_size: u64,
        #[arg(long, default_value_t = 1 << 30)]
        block_size: u64,
        #[arg(long, default_value_t = 1 << 20)]
        segment_start: u64,
        #[arg(long, default_value_t = 64 << 20)]
        segment_end: u64,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "bench-single.csv")]
        csv_out: PathBuf,
    },
    /// k synchronized clients on disjoint ranges.
    BenchConcurrent {
        #[arg(long, default_value = "tcp")]
        transport: String,
        /// Comma-separated client counts to sweep.
        #[arg(long, default_value = "1,2,4")]
        clients: String,
        /// Range size per client, bytes.
        #[arg(long, default_value_t = 64 << 20)]
        segment: u64,
        #[arg(long, default_value = "read")]
        mode: String,
        #[arg(long, default_value_t = 64 << 10)]
        page_size: u64,
        #[arg(long, default_value_t = 8)]
        data_providers: usize,
        #[arg(long, default_value_t = 4)]
        metadata_providers: usize,
        #[arg(long, default_value_t = 1)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "bench-concurrent.csv")]
        csv_out: PathBuf,
    },
    /// Internal: one synchronized bench client (spawned by bench-concurrent).
    #[command(hide = true)]
    BenchWorker {
        #[arg(long)]
        spec: String,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Deploy {
            data_providers,
            metadata_providers,
            capacity,
            manifest,
            duration,
            seed,
        } => {
            let transport = std::sync::Arc::new(TcpTransport::new());
            let config = DeployConfig {
                capacity_per_provider: capacity,
                vm: VmConfig { seed, ..VmConfig::default() },
                ..DeployConfig::new(data_providers, metadata_providers)
            };
            let constellation = deploy_local(transport, config)?;
            let listing = constellation.manifest();
            std::fs::write(&manifest, serde_json::to_string_pretty(&listing)?)
                .with_context(|| format!("writing {}", manifest.display()))?;
            println!("constellation up: {} data providers, {} gateways", data_providers, metadata_providers);
            println!("versioning manager at {}", listing.versioning);
            println!("manifest written to {}", manifest.display());
            match duration {
                Some(secs) => std::thread::sleep(std::time::Duration::from_secs(secs)),
                None => loop {
                    std::thread::sleep(std::time::Duration::from_secs(3600));
                },
            }
            constellation.shutdown();
            Ok(())
        }
        Command::Alloc { manifest, page_size, block_size } => {
            let client = client_from_manifest(&manifest, None)?;
            let block = client.alloc(page_size, block_size)?;
            println!("{block}");
            Ok(())
        }
        Command::Write { manifest, block_id, offset, input, size, fill_seed } => {
            let client = client_from_manifest(&manifest, None)?;
            let block = parse_block(&block_id)?;
            let buffer = match (input, size) {
                (Some(path), _) => {
                    std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?
                }
                (None, Some(size)) => bench::pattern(fill_seed, size as usize),
                (None, None) => bail!("pass --input FILE or --size BYTES"),
            };
            let version = client.write(block, &buffer, offset)?;
            println!("{version}");
            Ok(())
        }
        Command::Read { manifest, block_id, offset, size, version, out } => {
            let client = client_from_manifest(&manifest, None)?;
            let block = parse_block(&block_id)?;
            let bytes = client.read(block, version.map(Version), offset, size)?;
            match out {
                Some(path) => {
                    std::fs::write(&path, &bytes)
                        .with_context(|| format!("writing {}", path.display()))?;
                    println!("{} bytes written to {}", bytes.len(), path.display());
                }
                None => {
                    let preview: Vec<String> =
                        bytes.iter().take(32).map(|b| format!("{b:02x}")).collect();
                    println!("{} bytes, head: {}", bytes.len(), preview.join(""));
                }
            }
            Ok(())
        }
        Command::Verify { transport, scripts, clients, seed } => {
            let params = VerifyParams {
                scripts,
                max_clients: clients,
                transport: parse_transport(&transport)?,
                seed,
                ..VerifyParams::default()
            };
            match run_snapshot_verification(&params) {
                Ok(report) => {
                    println!(
                        "PASS: {} scripts, {} versions, {} reads matched the oracle",
                        report.scripts, report.versions_checked, report.reads_checked
                    );
                    Ok(())
                }
                Err(reason) => {
                    println!("FAIL: {reason}");
                    std::process::exit(1);
                }
            }
        }
        Command::BenchSingle {
            transport,
            data_providers,
            metadata_providers,
            page_size,
            block_size,
            segment_start,
            segment_end,
            reps,
            seed,
            csv_out,
        } => {
            let params = SingleBenchParams {
                page_size,
                block_size,
                segment_start,
                segment_end,
                repetitions: reps,
                metadata_sweep: parse_list(&metadata_providers)?,
                data_providers,
                seed,
                ..SingleBenchParams::default()
            };
            let outcome = run_bench_single(parse_transport(&transport)?, &params);
            let incomplete = outcome.error.as_ref().map(|e| e.to_string());
            write_csv(&csv_out, &outcome.rows, incomplete.as_deref())?;
            println!("{} rows -> {}", outcome.rows.len(), csv_out.display());
            match outcome.error {
                Some(error) => Err(anyhow!("run incomplete: {error}")),
                None => Ok(()),
            }
        }
        Command::BenchConcurrent {
            transport,
            clients,
            segment,
            mode,
            page_size,
            data_providers,
            metadata_providers,
            reps,
            seed,
            csv_out,
        } => {
            let kind = parse_transport(&transport)?;
            let params = ConcurrentBenchParams {
                page_size,
                segment,
                clients_sweep: parse_list(&clients)?,
                mode: AccessMode::parse(&mode).ok_or_else(|| anyhow!("mode is read or write"))?,
                repetitions: reps,
                data_providers,
                metadata_providers,
                seed,
                ..ConcurrentBenchParams::default()
            };
            // Real OS processes per client over TCP; threads in-process.
            let workers = match kind {
                TransportKind::Tcp => WorkerMode::Processes { exe: std::env::current_exe()? },
                TransportKind::Inproc => WorkerMode::Threads,
            };
            let outcome = run_bench_concurrent(kind, &params, workers);
            let incomplete = outcome.error.as_ref().map(|e| e.to_string());
            write_csv(&csv_out, &outcome.rows, incomplete.as_deref())?;
            for point in &outcome.points {
                println!(
                    "k={} aggregate {:.1} MB/s (ideal {:.1} MB/s, ratio {:.2})",
                    point.clients,
                    point.aggregate_mbps,
                    point.ideal_mbps,
                    point.aggregate_mbps / point.ideal_mbps.max(1e-9)
                );
            }
            println!("{} rows -> {}", outcome.rows.len(), csv_out.display());
            match outcome.error {
                Some(error) => Err(anyhow!("run incomplete: {error}")),
                None => Ok(()),
            }
        }
        Command::BenchWorker { spec } => run_bench_worker(&spec),
    }
}

fn run_bench_worker(raw: &str) -> Result<()> {
    let spec: WorkerSpec = serde_json::from_str(raw).context("parsing worker spec")?;
    let config = spec
        .manifest
        .client_config()
        .ok_or_else(|| anyhow!("manifest contains unparsable endpoints"))?;
    let mut config = config;
    config.seed = Some(spec.page_seed);
    let client = Client::new(std::sync::Arc::new(TcpTransport::new()), config);

    // Rendezvous: say ready, wait for the collective go.
    let barrier = spec.barrier.as_deref().ok_or_else(|| anyhow!("worker needs a barrier"))?;
    let mut stream = std::net::TcpStream::connect(barrier)
        .with_context(|| format!("connecting barrier {barrier}"))?;
    stream.write_all(b"R")?;
    let mut go = [0u8; 1];
    stream.read_exact(&mut go).context("waiting for barrier release")?;

    let result = bench::run_worker_op(&client, &spec).map_err(|e| anyhow!("{e}"))?;
    println!("{}", serde_json::to_string(&result)?);
    Ok(())
}

fn client_from_manifest(path: &std::path::Path, seed: Option<u64>) -> Result<Client> {
    let raw =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let manifest: Manifest = serde_json::from_str(&raw).context("parsing manifest")?;
    let mut config =
        manifest.client_config().ok_or_else(|| anyhow!("manifest contains unparsable endpoints"))?;
    config.seed = seed;
    Ok(Client::new(std::sync::Arc::new(TcpTransport::new()), config))
}

fn parse_block(hex: &str) -> Result<BlockId> {
    BlockId::parse_hex(hex).ok_or_else(|| anyhow!("block id must be 32 hex digits"))
}

fn parse_transport(s: &str) -> Result<TransportKind> {
    TransportKind::parse(s).ok_or_else(|| anyhow!("transport is inproc or tcp"))
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|part| part.trim().parse::<usize>().map_err(|e| anyhow!("bad count {part:?}: {e}")))
        .collect()
}
