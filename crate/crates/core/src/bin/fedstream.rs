use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand};
use fedstream::quant::Precision;
use fedstream::runtime::{
    bench_quant, bench_stream, format_quant_csv, format_stream_csv, run_client, run_server,
    simulate, JobConfig, JobReport,
};
use fedstream::sfm::{Driver, TcpAcceptor, TcpDriver, TransportConfig};
use fedstream::streaming::StreamMode;
use fedstream::ModelSpec;
use log::{debug, info};
use serde_json::json;

#[derive(Parser)]
#[command(name = "fedstream", version, about = "Federated message quantization and streaming toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a whole job in one process and write its JSON report.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Report destination; overrides the config's `output`. `-` is stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print message sizes per precision as CSV.
    BenchQuant {
        #[arg(long)]
        model_spec: Option<PathBuf>,
        /// fp32, fp16, bf16, blockwise8, float4, normfloat4, or `all`.
        #[arg(long, default_value = "all")]
        precision: String,
        /// Compute sizes from shapes only, without building the model.
        #[arg(long)]
        analytic: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Stream a synthetic model and print the peak buffered bytes as CSV.
    BenchStream {
        /// regular, container, file, or `all`.
        #[arg(long, default_value = "all")]
        mode: String,
        #[arg(long)]
        model_spec: Option<PathBuf>,
        /// Shrink every layer, e.g. `1/64`.
        #[arg(long, default_value = "1/64", value_parser = parse_scale)]
        scale: u64,
        #[arg(long, default_value_t = 1 << 20)]
        chunk_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for file-mode spools.
        #[arg(long)]
        workdir: Option<PathBuf>,
    },
    /// Run the controller over TCP and write the report.
    Server {
        #[arg(long)]
        listen: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run one executor over TCP.
    Client {
        #[arg(long)]
        connect: String,
        #[arg(long)]
        config: PathBuf,
        /// This executor's index in `0..clients`.
        #[arg(long)]
        index: usize,
    },
}

fn parse_scale(s: &str) -> Result<u64, String> {
    let denom = s.strip_prefix("1/").unwrap_or(s);
    match denom.parse::<u64>() {
        Ok(n) if n >= 1 => Ok(n),
        _ => Err(format!("expected a scale like 1/64, got {s:?}")),
    }
}

struct Failure {
    kind: &'static str,
    message: String,
}

impl Failure {
    fn new(kind: &'static str, e: impl std::fmt::Display) -> Self {
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<fedstream::runtime::JobError> for Failure {
    fn from(e: fedstream::runtime::JobError) -> Self {
        Self::new(e.kind(), &e)
    }
}

fn load_spec(path: Option<&Path>) -> Result<ModelSpec, Failure> {
    match path {
        None => Ok(ModelSpec::llama_3_2_1b()),
        Some(p) => {
            let json = std::fs::read_to_string(p)
                .map_err(|e| Failure::new("io", format!("{}: {e}", p.display())))?;
            ModelSpec::from_json(&json).map_err(|e| Failure::new("spec", e))
        }
    }
}

fn parse_precisions(s: &str) -> Result<Vec<Option<Precision>>, Failure> {
    match s.to_ascii_lowercase().as_str() {
        "all" => Ok(vec![
            None,
            Some(Precision::Fp16),
            Some(Precision::Blockwise8),
            Some(Precision::NormFloat4),
        ]),
        "fp32" | "none" => Ok(vec![None]),
        other => other
            .parse()
            .map(|p| vec![Some(p)])
            .map_err(|e| Failure::new("usage", e)),
    }
}

fn write_report(report: &JobReport, dest: Option<&Path>) -> Result<(), Failure> {
    let json = report.to_json();
    match dest {
        Some(p) if p != Path::new("-") => {
            std::fs::write(p, json + "\n")
                .map_err(|e| Failure::new("io", format!("{}: {e}", p.display())))?;
            info!("report written to {}", p.display());
        }
        _ => stdout(&(json + "\n"))?,
    }
    Ok(())
}

fn stdout(text: &str) -> Result<(), Failure> {
    std::io::stdout()
        .write_all(text.as_bytes())
        .map_err(|e| Failure::new("io", e))
}

/// Keeps trying while the server is not listening yet, up to the transport
/// timeout.
fn connect_with_retry(
    driver: &TcpDriver,
    transport: &TransportConfig,
) -> Result<fedstream::sfm::Connection, Failure> {
    let deadline = Instant::now() + transport.timeout();
    loop {
        match driver.open(transport) {
            Ok(conn) => return Ok(conn),
            Err(e) if Instant::now() < deadline => {
                debug!("connect failed ({e}), retrying");
                thread::sleep(Duration::from_millis(100));
            }
            Err(e) => return Err(Failure::new("transport", e)),
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Simulate { config, output } => {
            let cfg = JobConfig::load(&config)?;
            let report = simulate(&cfg)?;
            write_report(&report, output.as_deref().or(cfg.output.as_deref()))
        }
        Command::BenchQuant {
            model_spec,
            precision,
            analytic,
            seed,
        } => {
            let spec = load_spec(model_spec.as_deref())?;
            let precisions = parse_precisions(&precision)?;
            let rows = bench_quant(&spec, &precisions, analytic, seed)
                .map_err(|e| Failure::new("bench", e))?;
            stdout(&format_quant_csv(&rows))
        }
        Command::BenchStream {
            mode,
            model_spec,
            scale,
            chunk_size,
            seed,
            workdir,
        } => {
            let modes = if mode.eq_ignore_ascii_case("all") {
                StreamMode::ALL.to_vec()
            } else {
                vec![mode.parse().map_err(|e| Failure::new("usage", e))?]
            };
            TransportConfig::default()
                .with_chunk_size(chunk_size)
                .validate()
                .map_err(|e| Failure::new("usage", e))?;
            let spec = load_spec(model_spec.as_deref())?.scaled(scale);
            let dir = workdir.unwrap_or_else(std::env::temp_dir);
            let rows = modes
                .into_iter()
                .map(|m| bench_stream(&spec, m, seed, chunk_size, &dir))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| Failure::new("bench", e))?;
            stdout(&format_stream_csv(&rows))
        }
        Command::Server {
            listen,
            config,
            output,
        } => {
            let cfg = JobConfig::load(&config)?;
            let acceptor = TcpAcceptor::bind(&listen).map_err(|e| Failure::new("transport", e))?;
            info!(
                "listening on {}",
                acceptor.local_addr().map_err(|e| Failure::new("transport", e))?
            );
            let report = run_server(&acceptor, &cfg)?;
            write_report(&report, output.as_deref().or(cfg.output.as_deref()))
        }
        Command::Client {
            connect,
            config,
            index,
        } => {
            let cfg = JobConfig::load(&config)?;
            if index >= cfg.clients {
                return Err(Failure::new(
                    "usage",
                    format!("index {index} out of range for {} clients", cfg.clients),
                ));
            }
            let conn = connect_with_retry(&TcpDriver::new(connect), &cfg.transport)?;
            let rounds = run_client(conn, &cfg, index)?;
            info!("client {index} served {rounds} rounds");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FEDSTREAM_LOG", "warn")).init();
    // clap exits with status 2 and usage text on bad flags
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let code = if f.kind == "usage" { 2 } else { 1 };
            eprintln!("{}", json!({"error": f.kind, "message": f.message}));
            ExitCode::from(code)
        }
    }
}
