//! In-process simulation of the distributed runtime: task groups with
//! per-round barriers, a parameter server holding the authoritative
//! weights, and synchronous (AllReduce) or asynchronous (Downpour)
//! update propagation.
//!
//! The cluster is one process. Workers are threads that talk to the
//! server task over channels; topology is plain configuration. Pulls are
//! wait-free reads of an immutable snapshot; all pushes and merges are
//! serialized through the server's queue.

mod server;
mod service;

pub use server::{mean_deltas, ParameterServer, PushOutcome};
pub use service::{run_group, spawn_service, GroupResult, ServerEvent, ServerHandle, WorkerTask};

pub use crate::model::ParameterDelta;

use crate::model::NetworkModel;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// How worker updates reach the shared parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyncMode {
    /// One round's deltas from every worker are averaged and applied
    /// atomically, then the new snapshot is broadcast.
    AllReduce,
    /// Each worker's delta is applied as it arrives; workers tolerate
    /// stale parameters.
    Downpour,
}

/// Cluster topology and scheduling switches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterConfig {
    pub n_groups: usize,
    pub tasks_per_group: usize,
    pub sync_mode: SyncMode,
    /// Serialize workers round-robin with derived RNG streams so repeated
    /// runs are bit-identical.
    pub deterministic: bool,
    pub seed: u64,
    /// Downpour only: reject pushes whose basis version lags the current
    /// one by more than this. `None` leaves staleness unbounded.
    pub max_staleness: Option<u64>,
}

impl ClusterConfig {
    pub fn n_workers(&self) -> usize {
        self.n_groups * self.tasks_per_group
    }

    pub fn validate(&self) -> Result<(), ClusterError> {
        if self.n_groups == 0 || self.tasks_per_group == 0 {
            return Err(ClusterError::InvalidConfig(
                "cluster needs at least one group and one task per group".into(),
            ));
        }
        Ok(())
    }
}

/// The update rule the server applies to merged deltas; supplied by the
/// training layer so the server stays agnostic of optimizer details.
pub trait UpdateRule: Send {
    fn apply(&mut self, model: &mut NetworkModel, delta: &ParameterDelta) -> Result<(), String>;
}

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("invalid cluster config: {0}")]
    InvalidConfig(String),
    #[error("unknown worker {0}")]
    UnknownWorker(usize),
    #[error("delta shape mismatch from worker {worker}")]
    ShapeMismatch { worker: usize },
    #[error("duplicate push from worker {worker} in round at version {version}")]
    DuplicatePush { worker: usize, version: u64 },
    #[error("allreduce merge needs {need} deltas, got {have}")]
    IncompleteRound { have: usize, need: usize },
    #[error("parameter update failed: {0}")]
    UpdateFailed(String),
    #[error("parameter server is gone")]
    ServerGone,
    #[error("run aborted: {0}")]
    Aborted(String),
    #[error("worker {worker} in group {group} failed: {message}")]
    WorkerFailed {
        group: usize,
        worker: usize,
        message: String,
    },
}
