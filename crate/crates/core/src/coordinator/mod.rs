//! Client-server orchestration of a bucket search.
//!
//! The server owns the optimizer and a job table ([`state::ServerState`]),
//! hands proposals to clients over a line-delimited JSON protocol
//! ([`protocol`]), and persists every result before acknowledging it
//! ([`checkpoint`]). Clients ([`client`]) evaluate proposals and report back.
//! [`local::run_lockstep`] drives the same state machine without sockets for
//! deterministic single-process searches.

pub mod checkpoint;
pub mod client;
pub mod local;
pub mod protocol;
pub mod server;
pub mod state;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optimizer::{OptimizerConfig, OptimizerError};
use crate::sampler::LatencyBucket;

pub use checkpoint::{CheckpointStore, FaultPlan, KillPoint, Manifest};
pub use client::{run_client, ClientConfig, ClientFault, ClientReport};
pub use local::run_lockstep;
pub use protocol::{EvalConfig, ProtocolError, WireMessage, PROTOCOL_VERSION};
pub use server::{serve, ServerHandle, ServerOptions, ServerSummary};
pub use state::{Command, Effect, Job, JobState, Outcome, ServerSnapshot, ServerState};

#[derive(Debug, Error)]
pub enum CoordinatorError {
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
    #[error("network: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("server refused: {0}")]
    Refused(String),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error("invalid configuration: {0}")]
    Config(String),
    /// Raised by fault injection; the server stops as if killed.
    #[error("injected crash at {0}")]
    InjectedCrash(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoordinatorConfig {
    /// Number of completed results to collect.
    pub budget: usize,
    pub seed: u64,
    pub bucket_lower_ms: f64,
    /// `None` for an unbounded bucket.
    pub bucket_upper_ms: Option<f64>,
    pub optimizer: OptimizerConfig,
    /// Assignments per job before it is failed permanently.
    pub attempt_limit: u32,
    pub heartbeat_interval_s: f64,
    /// Missed heartbeats before a job times out.
    pub missed_beats: u32,
    pub retry_after_s: f64,
    /// Passed through to clients.
    pub epochs: u32,
    /// Snapshot after this many results, in addition to every new job.
    pub snapshot_every: usize,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        Self {
            budget: 100,
            seed: 0,
            bucket_lower_ms: 0.0,
            bucket_upper_ms: Some(2.0),
            optimizer: OptimizerConfig::default(),
            attempt_limit: 3,
            heartbeat_interval_s: 30.0,
            missed_beats: 3,
            retry_after_s: 5.0,
            epochs: 450,
            snapshot_every: 10,
        }
    }
}

impl CoordinatorConfig {
    pub fn bucket(&self) -> LatencyBucket {
        LatencyBucket::new(self.bucket_lower_ms, self.bucket_upper_ms.unwrap_or(f64::INFINITY))
    }

    pub fn check(&self) -> Result<(), CoordinatorError> {
        let upper = self.bucket_upper_ms.unwrap_or(f64::INFINITY);
        if !(self.bucket_lower_ms >= 0.0 && upper > self.bucket_lower_ms) {
            return Err(CoordinatorError::Config(format!(
                "bucket {}:{} is empty",
                self.bucket_lower_ms, upper
            )));
        }
        if self.budget == 0 || self.attempt_limit == 0 || self.missed_beats == 0 {
            return Err(CoordinatorError::Config(
                "budget, attempt_limit and missed_beats must be positive".into(),
            ));
        }
        if !(self.heartbeat_interval_s > 0.0) || !(self.retry_after_s >= 0.0) {
            return Err(CoordinatorError::Config("heartbeat and retry intervals must be positive".into()));
        }
        self.optimizer.check().map_err(CoordinatorError::Optimizer)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            schema_version: checkpoint::MANIFEST_SCHEMA_VERSION,
            latest_snapshot: None,
            bucket_lower_ms: self.bucket_lower_ms,
            bucket_upper_ms: self.bucket_upper_ms,
            budget: self.budget,
            seed: self.seed,
        }
    }
}
