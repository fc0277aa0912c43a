//! Controller/executor runtime: a toy federated least-squares job driven
//! through the filter pipeline and the streaming transport, plus the
//! benchmark drivers behind the CLI.

mod bench;
mod job;
mod toy;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filter::{FilterChain, FilterConfig, FilterError};
use crate::quant::Precision;
use crate::sfm::{SfmError, TransportConfig};
use crate::streaming::{StreamError, StreamMode};

pub use bench::{
    bench_quant, bench_stream, format_quant_csv, format_stream_csv, transfer_file, BenchError,
    QuantRow, StreamRow, QUANT_CSV_HEADER, STREAM_CSV_HEADER,
};
pub use job::{run_client, run_server, simulate};
pub use toy::{
    fedavg, global_loss, initial_model, make_shard, model_checksum, target_weights,
    toy_local_train, AggError, Shard, TaskError, WEIGHT_NAME,
};

/// Settings of the synthetic least-squares task.
///
/// Each client holds `samples_per_client` pairs `(x, y)` with
/// `x ~ N(0, I_dimension)` and `y = W* x + noise`, where `W*` has
/// `outputs x dimension` entries drawn from `N(0, target_std^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    #[serde(default = "defaults::dimension")]
    pub dimension: usize,
    #[serde(default = "defaults::outputs")]
    pub outputs: usize,
    #[serde(default = "defaults::samples")]
    pub samples_per_client: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::local_steps")]
    pub local_steps: usize,
    #[serde(default = "defaults::noise_std")]
    pub noise_std: f64,
    #[serde(default = "defaults::target_std")]
    pub target_std: f64,
    /// Initial weights are uniform in `[-init_scale, init_scale)`, rounded
    /// to fp16-representable values.
    #[serde(default = "defaults::init_scale")]
    pub init_scale: f64,
    pub seed: u64,
}

mod defaults {
    pub fn dimension() -> usize {
        32
    }
    pub fn outputs() -> usize {
        8192
    }
    pub fn samples() -> usize {
        256
    }
    pub fn learning_rate() -> f64 {
        0.5
    }
    pub fn local_steps() -> usize {
        5
    }
    pub fn noise_std() -> f64 {
        2.0
    }
    pub fn target_std() -> f64 {
        0.5
    }
    pub fn init_scale() -> f64 {
        0.1
    }
    pub fn clients() -> usize {
        2
    }
    pub fn rounds() -> usize {
        20
    }
}

impl ToyConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            dimension: defaults::dimension(),
            outputs: defaults::outputs(),
            samples_per_client: defaults::samples(),
            learning_rate: defaults::learning_rate(),
            local_steps: defaults::local_steps(),
            noise_std: defaults::noise_std(),
            target_std: defaults::target_std(),
            init_scale: defaults::init_scale(),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobConfig {
    #[serde(default = "defaults::clients")]
    pub clients: usize,
    #[serde(default = "defaults::rounds")]
    pub rounds: usize,
    /// Two-way quantization precision; `None` runs without filters.
    #[serde(default)]
    pub precision: Option<Precision>,
    #[serde(default = "default_mode")]
    pub stream_mode: StreamMode,
    #[serde(default)]
    pub transport: TransportConfig,
    pub task: ToyConfig,
    /// Where `simulate` writes the report.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Adds wall-clock time to the report, which makes it run-dependent.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub record_timing: bool,
}

fn default_mode() -> StreamMode {
    StreamMode::Regular
}

impl JobConfig {
    pub fn new(clients: usize, rounds: usize, task: ToyConfig) -> Self {
        Self {
            clients,
            rounds,
            precision: None,
            stream_mode: StreamMode::Regular,
            transport: TransportConfig::default(),
            task,
            output: None,
            record_timing: false,
        }
    }

    pub fn with_precision(mut self, precision: Option<Precision>) -> Self {
        self.precision = precision;
        self
    }

    pub fn with_mode(mut self, mode: StreamMode) -> Self {
        self.stream_mode = mode;
        self
    }

    pub fn from_json(json: &str) -> Result<Self, JobError> {
        let config: Self = serde_json::from_str(json).map_err(|e| JobError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, JobError> {
        let json = std::fs::read_to_string(path)
            .map_err(|e| JobError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&json)
    }

    pub fn validate(&self) -> Result<(), JobError> {
        let bad = |why: &str| Err(JobError::Config(why.to_owned()));
        if self.clients == 0 {
            return bad("clients must be at least 1");
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1");
        }
        let t = &self.task;
        if t.dimension == 0 || t.outputs == 0 || t.samples_per_client == 0 {
            return bad("task dimension, outputs and samples_per_client must be positive");
        }
        if !(t.learning_rate.is_finite() && t.learning_rate > 0.0) {
            return bad("learning_rate must be positive and finite");
        }
        for (name, v) in [
            ("noise_std", t.noise_std),
            ("target_std", t.target_std),
            ("init_scale", t.init_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(JobError::Config(format!("{name} must be finite and non-negative")));
            }
        }
        self.transport
            .validate()
            .map_err(|e| JobError::Config(format!("transport: {e}")))
    }

    pub fn filter_chain(&self) -> FilterChain {
        match self.precision {
            Some(p) => FilterChain::from_config(&FilterConfig::two_way(p))
                .expect("two-way config uses registered filters"),
            None => FilterChain::new(),
        }
    }
}

/// One client's share of a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub client: usize,
    pub samples: u64,
    /// Loss on the client's shard after local training.
    pub train_loss: f64,
    /// Wire bytes (both directions, frame headers included) exchanged while
    /// the task data travelled to the client.
    pub down_bytes: u64,
    /// Same for the task result travelling back.
    pub up_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub clients: Vec<ClientRecord>,
    /// Loss of the aggregated model on the pooled client data.
    pub global_loss: f64,
    /// SHA-256 of the aggregated model's FTNS serialization.
    pub checksum: String,
    /// Payload plus metadata bytes predicted by the size report.
    pub predicted_leg_bytes: u64,
    pub server_send_peak: u64,
    pub server_recv_peak: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobTotals {
    pub bytes_down: u64,
    pub bytes_up: u64,
    pub final_loss: f64,
    pub final_checksum: String,
    pub max_send_peak: u64,
    pub max_recv_peak: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobReport {
    pub config: JobConfig,
    pub rounds: Vec<RoundRecord>,
    pub totals: JobTotals,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elapsed_s: Option<f64>,
}

impl JobReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn final_loss(&self) -> f64 {
        self.totals.final_loss
    }
}

#[derive(Debug, Error)]
pub enum JobError {
    #[error("invalid job config: {0}")]
    Config(String),
    #[error(transparent)]
    Transport(#[from] SfmError),
    #[error("round {round} failed; missing clients {missing:?}: {reason}")]
    Round {
        round: usize,
        missing: Vec<usize>,
        reason: String,
    },
    #[error("handshake failed: {0}")]
    Handshake(String),
    #[error("client {client}: {source}")]
    Client {
        client: usize,
        #[source]
        source: Box<JobError>,
    },
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Aggregation(#[from] AggError),
    #[error("{path}: {reason}")]
    Io { path: PathBuf, reason: String },
}

impl JobError {
    /// Short machine-readable category, used in the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            JobError::Config(_) => "config",
            JobError::Transport(_) => "transport",
            JobError::Round { .. } => "round",
            JobError::Handshake(_) => "handshake",
            JobError::Client { .. } => "client",
            JobError::Stream(_) => "stream",
            JobError::Filter(_) => "filter",
            JobError::Task(_) => "task",
            JobError::Aggregation(_) => "aggregation",
            JobError::Io { .. } => "io",
        }
    }
}
