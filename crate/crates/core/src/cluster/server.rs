//! The parameter server state machine: versioned weight snapshots,
//! delta buffering for AllReduce rounds, immediate application for
//! Downpour.

use super::{ClusterError, SyncMode, UpdateRule};
use crate::model::{NetworkModel, ParamSet, ParameterDelta};
use std::sync::Arc;

/// Result of a push.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PushOutcome {
    /// AllReduce: buffered, waiting for the rest of the round.
    Buffered,
    /// The delta (or its round) was applied, producing this version.
    Applied { version: u64 },
    /// The server reached its version limit; the delta was discarded.
    Stopped { version: u64 },
    /// Downpour staleness bound exceeded; the delta was discarded.
    Stale { version: u64 },
}

/// Arithmetic mean of worker deltas, summed in the order given. Sample
/// counts add up.
pub fn mean_deltas(deltas: &[ParameterDelta]) -> Option<ParameterDelta> {
    let (first, rest) = deltas.split_first()?;
    let mut merged = first.clone();
    for d in rest {
        merged.add_assign(d);
    }
    merged.scale(1.0 / deltas.len() as f64);
    Some(merged)
}

/// Holds the authoritative model, applies merged updates through the
/// supplied rule, and hands out immutable versioned snapshots.
pub struct ParameterServer<U: UpdateRule> {
    model: NetworkModel,
    update: U,
    mode: SyncMode,
    n_workers: usize,
    version: u64,
    snapshot: Arc<ParamSet>,
    pending: Vec<Option<ParameterDelta>>,
    max_staleness: Option<u64>,
    stop_at: Option<u64>,
}

impl<U: UpdateRule> ParameterServer<U> {
    pub fn new(
        model: NetworkModel,
        update: U,
        mode: SyncMode,
        n_workers: usize,
        max_staleness: Option<u64>,
        stop_at: Option<u64>,
    ) -> Self {
        assert!(n_workers >= 1, "at least one worker");
        let snapshot = Arc::new(model.store().params());
        ParameterServer {
            model,
            update,
            mode,
            n_workers,
            version: 0,
            snapshot,
            pending: (0..n_workers).map(|_| None).collect(),
            max_staleness,
            stop_at,
        }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn mode(&self) -> SyncMode {
        self.mode
    }

    pub fn n_workers(&self) -> usize {
        self.n_workers
    }

    /// Consistent snapshot of the current parameters with its version.
    pub fn pull(&self) -> (Arc<ParamSet>, u64) {
        (Arc::clone(&self.snapshot), self.version)
    }

    /// Recovers the trained model (weights, biases, velocities).
    pub fn into_model(self) -> NetworkModel {
        self.model
    }

    fn reached_stop(&self) -> bool {
        self.stop_at.is_some_and(|limit| self.version >= limit)
    }

    fn shapes_match(&self, delta: &ParameterDelta) -> bool {
        delta.layer_units() == self.model.layer_units()
    }

    /// Accepts one worker's delta. AllReduce buffers it until the round is
    /// complete, then merges; Downpour applies it immediately.
    pub fn push(
        &mut self,
        worker_id: usize,
        basis_version: u64,
        delta: ParameterDelta,
    ) -> Result<PushOutcome, ClusterError> {
        if worker_id >= self.n_workers {
            return Err(ClusterError::UnknownWorker(worker_id));
        }
        if !self.shapes_match(&delta) {
            return Err(ClusterError::ShapeMismatch { worker: worker_id });
        }
        if self.reached_stop() {
            return Ok(PushOutcome::Stopped {
                version: self.version,
            });
        }
        match self.mode {
            SyncMode::AllReduce => {
                if self.pending[worker_id].is_some() {
                    return Err(ClusterError::DuplicatePush {
                        worker: worker_id,
                        version: self.version,
                    });
                }
                self.pending[worker_id] = Some(delta);
                if self.pending.iter().all(Option::is_some) {
                    let deltas: Vec<ParameterDelta> =
                        self.pending.iter_mut().map(|d| d.take().unwrap()).collect();
                    let version = self.allreduce_merge(deltas)?;
                    Ok(PushOutcome::Applied { version })
                } else {
                    Ok(PushOutcome::Buffered)
                }
            }
            SyncMode::Downpour => {
                if let Some(limit) = self.max_staleness {
                    if self.version.saturating_sub(basis_version) > limit {
                        return Ok(PushOutcome::Stale {
                            version: self.version,
                        });
                    }
                }
                self.apply(&delta)?;
                Ok(PushOutcome::Applied {
                    version: self.version,
                })
            }
        }
    }

    /// Averages one complete round of worker deltas (ascending worker
    /// order, so the merge is bit-deterministic) and applies the result.
    pub fn allreduce_merge(&mut self, deltas: Vec<ParameterDelta>) -> Result<u64, ClusterError> {
        if deltas.len() != self.n_workers {
            return Err(ClusterError::IncompleteRound {
                have: deltas.len(),
                need: self.n_workers,
            });
        }
        let merged = mean_deltas(&deltas).expect("round is non-empty");
        self.apply(&merged)?;
        Ok(self.version)
    }

    fn apply(&mut self, delta: &ParameterDelta) -> Result<(), ClusterError> {
        self.update
            .apply(&mut self.model, delta)
            .map_err(ClusterError::UpdateFailed)?;
        self.version += 1;
        self.snapshot = Arc::new(self.model.store().params());
        Ok(())
    }
}
