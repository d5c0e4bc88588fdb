//! Threaded front end for the parameter server plus the per-group worker
//! loop. Workers talk to the server thread over a request channel; an
//! AllReduce push blocks until its round merges, which is what gives the
//! mode its global round barrier.

use super::server::{ParameterServer, PushOutcome};
use super::{ClusterError, UpdateRule};
use crate::model::{ParamSet, ParameterDelta};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Barrier};
use std::thread::{self, JoinHandle};
use std::time::Instant;

enum Request {
    Push {
        worker: usize,
        group: usize,
        round: u64,
        basis_version: u64,
        delta: ParameterDelta,
        loss: f64,
        reply: Sender<Result<PushOutcome, ClusterError>>,
    },
    Pull {
        reply: Sender<(Arc<ParamSet>, u64)>,
    },
    Abort {
        worker: usize,
        message: String,
    },
}

/// One applied worker push (for AllReduce, one per round participant).
#[derive(Debug, Clone)]
pub struct ServerEvent {
    pub round: u64,
    pub version: u64,
    pub group: usize,
    pub worker: usize,
    pub loss: f64,
    pub wall_ms: u64,
    pub snapshot: Arc<ParamSet>,
}

/// Cloneable client for the server thread.
#[derive(Clone)]
pub struct ServerHandle {
    tx: Sender<Request>,
}

impl ServerHandle {
    pub fn pull(&self) -> Result<(Arc<ParamSet>, u64), ClusterError> {
        let (reply, rx) = channel();
        self.tx
            .send(Request::Pull { reply })
            .map_err(|_| ClusterError::ServerGone)?;
        rx.recv().map_err(|_| ClusterError::ServerGone)
    }

    /// Sends a delta and blocks until the server acknowledges it. In
    /// AllReduce mode the acknowledgment arrives when the whole round has
    /// merged.
    #[allow(clippy::too_many_arguments)]
    pub fn push(
        &self,
        worker: usize,
        group: usize,
        round: u64,
        basis_version: u64,
        delta: ParameterDelta,
        loss: f64,
    ) -> Result<PushOutcome, ClusterError> {
        let (reply, rx) = channel();
        self.tx
            .send(Request::Push {
                worker,
                group,
                round,
                basis_version,
                delta,
                loss,
                reply,
            })
            .map_err(|_| ClusterError::ServerGone)?;
        rx.recv().map_err(|_| ClusterError::ServerGone)?
    }

    /// Reports an unrecoverable worker failure; the server poisons itself
    /// so every blocked or future request unwinds.
    pub fn abort(&self, worker: usize, message: String) {
        let _ = self.tx.send(Request::Abort { worker, message });
    }
}

struct RoundWaiter {
    worker: usize,
    group: usize,
    round: u64,
    loss: f64,
    reply: Sender<Result<PushOutcome, ClusterError>>,
}

/// Spawns the server thread. Returns the client handle, the applied-push
/// event stream, and a join handle yielding the server back once every
/// client handle has been dropped.
pub fn spawn_service<U: UpdateRule + 'static>(
    server: ParameterServer<U>,
) -> (
    ServerHandle,
    Receiver<ServerEvent>,
    JoinHandle<ParameterServer<U>>,
) {
    let (tx, rx) = channel::<Request>();
    let (event_tx, event_rx) = channel::<ServerEvent>();
    let join = thread::spawn(move || serve(server, rx, event_tx));
    (ServerHandle { tx }, event_rx, join)
}

fn serve<U: UpdateRule>(
    mut server: ParameterServer<U>,
    rx: Receiver<Request>,
    events: Sender<ServerEvent>,
) -> ParameterServer<U> {
    let started = Instant::now();
    let mut waiters: Vec<RoundWaiter> = Vec::new();
    let mut poisoned: Option<String> = None;

    while let Ok(request) = rx.recv() {
        match request {
            Request::Pull { reply } => {
                // pulls stay consistent even after poisoning: snapshots are
                // immutable, and the worker loop aborts on its next push
                let _ = reply.send(server.pull());
            }
            Request::Abort { worker, message } => {
                let message = format!("worker {worker}: {message}");
                for waiter in waiters.drain(..) {
                    let _ = waiter
                        .reply
                        .send(Err(ClusterError::Aborted(message.clone())));
                }
                poisoned = Some(message);
            }
            Request::Push {
                worker,
                group,
                round,
                basis_version,
                delta,
                loss,
                reply,
            } => {
                if let Some(message) = &poisoned {
                    let _ = reply.send(Err(ClusterError::Aborted(message.clone())));
                    continue;
                }
                match server.push(worker, basis_version, delta) {
                    Ok(PushOutcome::Buffered) => {
                        waiters.push(RoundWaiter {
                            worker,
                            group,
                            round,
                            loss,
                            reply,
                        });
                    }
                    Ok(PushOutcome::Applied { version }) => {
                        let wall_ms = started.elapsed().as_millis() as u64;
                        let (snapshot, _) = server.pull();
                        // emit the round's events in ascending worker order,
                        // matching the merge order, so downstream loss
                        // aggregation is independent of push arrival order
                        waiters.push(RoundWaiter {
                            worker,
                            group,
                            round,
                            loss,
                            reply,
                        });
                        waiters.sort_by_key(|w| w.worker);
                        for waiter in waiters.drain(..) {
                            let _ = events.send(ServerEvent {
                                round: waiter.round,
                                version,
                                group: waiter.group,
                                worker: waiter.worker,
                                loss: waiter.loss,
                                wall_ms,
                                snapshot: Arc::clone(&snapshot),
                            });
                            let _ = waiter
                                .reply
                                .send(Ok(PushOutcome::Applied { version }));
                        }
                    }
                    Ok(outcome) => {
                        let _ = reply.send(Ok(outcome));
                    }
                    Err(e) => {
                        // protocol errors poison the run like worker failures
                        let message = e.to_string();
                        for waiter in waiters.drain(..) {
                            let _ = waiter
                                .reply
                                .send(Err(ClusterError::Aborted(message.clone())));
                        }
                        poisoned = Some(message);
                        let _ = reply.send(Err(e));
                    }
                }
            }
        }
    }
    server
}

/// One training task inside a group: computes a delta against a pulled
/// snapshot each round.
pub trait WorkerTask: Send {
    fn worker_id(&self) -> usize;

    fn run_round(
        &mut self,
        params: &ParamSet,
        version: u64,
        round: u64,
    ) -> Result<(ParameterDelta, f64), Box<dyn std::error::Error + Send + Sync>>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupResult {
    pub group_id: usize,
    pub rounds_per_task: Vec<u64>,
}

/// Drives one group's tasks in lockstep rounds until the server version
/// reaches `stop_after`. Tasks of the group share two barriers per round:
/// one to enter, one to agree on the pull-phase stop vote, so no task can
/// strand the others. Across groups no ordering is enforced.
///
/// A task failure aborts the whole group (and poisons the server); the
/// first root-cause error is returned as the diagnostic.
pub fn run_group<T: WorkerTask>(
    group_id: usize,
    stop_after: u64,
    tasks: Vec<T>,
    handle: &ServerHandle,
) -> Result<GroupResult, ClusterError> {
    assert!(!tasks.is_empty(), "a group needs at least one task");
    let barrier = Barrier::new(tasks.len());
    let stop = AtomicBool::new(false);

    let outcomes: Vec<(u64, Option<ClusterError>)> = thread::scope(|scope| {
        let joins: Vec<_> = tasks
            .into_iter()
            .map(|mut task| {
                let handle = handle.clone();
                let barrier = &barrier;
                let stop = &stop;
                scope.spawn(move || {
                    let mut rounds = 0u64;
                    let mut failure: Option<ClusterError> = None;
                    loop {
                        barrier.wait();
                        if stop.load(Ordering::SeqCst) {
                            break;
                        }
                        let pulled = match handle.pull() {
                            Ok(p) => Some(p),
                            Err(e) => {
                                failure = Some(e);
                                stop.store(true, Ordering::SeqCst);
                                None
                            }
                        };
                        if let Some((_, version)) = &pulled {
                            if *version >= stop_after {
                                stop.store(true, Ordering::SeqCst);
                            }
                        }
                        barrier.wait();
                        if stop.load(Ordering::SeqCst) {
                            break;
                        }
                        let (params, version) = pulled.expect("pull succeeded and run continues");
                        match task.run_round(&params, version, rounds) {
                            Err(e) => {
                                let err = ClusterError::WorkerFailed {
                                    group: group_id,
                                    worker: task.worker_id(),
                                    message: e.to_string(),
                                };
                                handle.abort(task.worker_id(), e.to_string());
                                failure = Some(err);
                                stop.store(true, Ordering::SeqCst);
                            }
                            Ok((delta, loss)) => {
                                match handle.push(
                                    task.worker_id(),
                                    group_id,
                                    rounds,
                                    version,
                                    delta,
                                    loss,
                                ) {
                                    Ok(PushOutcome::Stopped { .. }) => {
                                        stop.store(true, Ordering::SeqCst);
                                    }
                                    Ok(_) => {
                                        rounds += 1;
                                    }
                                    Err(e) => {
                                        failure = Some(e);
                                        stop.store(true, Ordering::SeqCst);
                                    }
                                }
                            }
                        }
                    }
                    (rounds, failure)
                })
            })
            .collect();
        joins
            .into_iter()
            .map(|j| j.join().expect("group task panicked"))
            .collect()
    });

    let mut rounds_per_task = Vec::with_capacity(outcomes.len());
    let mut root_cause: Option<ClusterError> = None;
    let mut other: Option<ClusterError> = None;
    for (rounds, failure) in outcomes {
        rounds_per_task.push(rounds);
        match failure {
            Some(e @ ClusterError::WorkerFailed { .. }) if root_cause.is_none() => {
                root_cause = Some(e)
            }
            Some(e) if other.is_none() => other = Some(e),
            _ => {}
        }
    }
    match root_cause.or(other) {
        Some(e) => Err(e),
        None => Ok(GroupResult {
            group_id,
            rounds_per_task,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::SyncMode;
    use crate::model::{LayerSpec, NetworkModel};
    use crate::numeric::ActivationKind;
    use std::collections::HashSet;

    struct AddRule;

    impl UpdateRule for AddRule {
        fn apply(&mut self, model: &mut NetworkModel, delta: &ParameterDelta) -> Result<(), String> {
            for (w, d) in model.store_mut().weights.iter_mut().zip(&delta.weights) {
                *w += d;
            }
            Ok(())
        }
    }

    fn toy_model() -> NetworkModel {
        let mut m = NetworkModel::new(0);
        m.add_layer(LayerSpec::standard(2, ActivationKind::Identity))
            .unwrap();
        m.add_layer(LayerSpec::standard(2, ActivationKind::SoftmaxOutput))
            .unwrap();
        for w in &mut m.store_mut().weights {
            w.fill(0.0);
        }
        m
    }

    struct ConstantTask {
        worker: usize,
        value: f64,
        fail_on_round: Option<u64>,
    }

    impl WorkerTask for ConstantTask {
        fn worker_id(&self) -> usize {
            self.worker
        }

        fn run_round(
            &mut self,
            _params: &ParamSet,
            _version: u64,
            round: u64,
        ) -> Result<(ParameterDelta, f64), Box<dyn std::error::Error + Send + Sync>> {
            if self.fail_on_round == Some(round) {
                return Err("synthetic failure".into());
            }
            let mut d = ParameterDelta::zeros(&[2, 2]);
            d.weights[0][[0, 0]] = self.value;
            d.sample_count = 1;
            Ok((d, 0.5))
        }
    }

    #[test]
    fn single_worker_group_runs_to_stop() {
        let server = ParameterServer::new(
            toy_model(),
            AddRule,
            SyncMode::AllReduce,
            1,
            None,
            Some(5),
        );
        let (handle, events, join) = spawn_service(server);
        let tasks = vec![ConstantTask {
            worker: 0,
            value: 1.0,
            fail_on_round: None,
        }];
        let result = run_group(0, 5, tasks, &handle).unwrap();
        assert_eq!(result.rounds_per_task, vec![5]);
        drop(handle);
        let server = join.join().unwrap();
        assert_eq!(server.version(), 5);
        assert_eq!(server.pull().0.weights[0][[0, 0]], 5.0);
        let versions: Vec<u64> = events.iter().map(|e| e.version).collect();
        assert_eq!(versions, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn allreduce_two_groups_merge_each_round() {
        let server = ParameterServer::new(
            toy_model(),
            AddRule,
            SyncMode::AllReduce,
            2,
            None,
            Some(3),
        );
        let (handle, events, join) = spawn_service(server);
        let h2 = handle.clone();
        let (r1, r2) = thread::scope(|s| {
            let g0 = s.spawn(|| {
                run_group(
                    0,
                    3,
                    vec![ConstantTask {
                        worker: 0,
                        value: 2.0,
                        fail_on_round: None,
                    }],
                    &handle,
                )
            });
            let g1 = s.spawn(|| {
                run_group(
                    1,
                    3,
                    vec![ConstantTask {
                        worker: 1,
                        value: 4.0,
                        fail_on_round: None,
                    }],
                    &h2,
                )
            });
            (g0.join().unwrap(), g1.join().unwrap())
        });
        r1.unwrap();
        r2.unwrap();
        drop(handle);
        drop(h2);
        let server = join.join().unwrap();
        // each round applies mean(2, 4) = 3
        assert_eq!(server.pull().0.weights[0][[0, 0]], 9.0);
        // every participant of every round produced an event
        assert_eq!(events.iter().count(), 6);
    }

    #[test]
    fn concurrent_pulls_see_only_produced_versions() {
        let server = ParameterServer::new(
            toy_model(),
            AddRule,
            SyncMode::Downpour,
            1,
            None,
            Some(200),
        );
        let (handle, _events, join) = spawn_service(server);
        let pusher = handle.clone();
        let puller = handle.clone();
        let (observed, pushed) = thread::scope(|s| {
            let p = s.spawn(move || {
                let mut seen = Vec::new();
                for _ in 0..500 {
                    let (snap, version) = puller.pull().unwrap();
                    seen.push((version, snap.weights[0][[0, 0]].to_bits()));
                }
                seen
            });
            let w = s.spawn(move || {
                let mut produced = vec![(0u64, 0.0f64.to_bits())];
                for round in 0..200u64 {
                    let mut d = ParameterDelta::zeros(&[2, 2]);
                    d.weights[0][[0, 0]] = 0.25;
                    d.sample_count = 1;
                    match pusher.push(0, 0, round, 0, d, 0.0).unwrap() {
                        PushOutcome::Applied { version } => {
                            produced.push((version, (0.25 * version as f64).to_bits()));
                        }
                        other => panic!("unexpected outcome {other:?}"),
                    }
                }
                produced
            });
            (p.join().unwrap(), w.join().unwrap())
        });
        drop(handle);
        join.join().unwrap();
        // every observed snapshot corresponds to exactly one produced version
        let produced: HashSet<(u64, u64)> = pushed.into_iter().collect();
        for snap in observed {
            assert!(produced.contains(&snap), "torn snapshot {snap:?}");
        }
    }

    #[test]
    fn worker_failure_aborts_group_with_diagnostic() {
        let server = ParameterServer::new(
            toy_model(),
            AddRule,
            SyncMode::AllReduce,
            2,
            None,
            Some(100),
        );
        let (handle, _events, join) = spawn_service(server);
        let tasks = vec![
            ConstantTask {
                worker: 0,
                value: 1.0,
                fail_on_round: None,
            },
            ConstantTask {
                worker: 1,
                value: 1.0,
                fail_on_round: Some(2),
            },
        ];
        let err = run_group(0, 100, tasks, &handle).unwrap_err();
        match err {
            ClusterError::WorkerFailed { group, worker, message } => {
                assert_eq!(group, 0);
                assert_eq!(worker, 1);
                assert!(message.contains("synthetic failure"));
            }
            other => panic!("expected WorkerFailed, got {other}"),
        }
        drop(handle);
        join.join().unwrap();
    }
}
