//! Orchestration of a training run: workers over data partitions and
//! sub-model masks, the parameter server between them, and the metrics
//! that come out.
//!
//! Deterministic mode drives every worker round-robin on one thread, so
//! a run is a pure function of (config, seed, dataset). Threaded mode
//! spawns the groups for real and lets the scheduler interleave them.

use super::{
    evaluate, mask_rng, partition_rng, train_batch, worker_round_rng, Hyperparams, MetricPoint,
    SgdMomentum, TrainError, TrainMetrics,
};
use crate::cluster::{
    run_group, spawn_service, ClusterConfig, ParameterServer, PushOutcome, ServerEvent,
    SyncMode, WorkerTask,
};
use crate::data::{DataError, Dataset};
use crate::model::{ModelError, NetworkModel, ParamSet, ParameterDelta};
use crate::partition::{generate_submodel, split_dataset, MaskPolicy, SubModelMask};
use std::io::{self, Write};
use std::sync::mpsc::Receiver;
use std::sync::Arc;
use std::thread;
use std::time::Instant;

/// Knobs of a run that are not hyperparameters of the optimization itself.
#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    /// Evaluate on the test set every this many versions; 0 means only the
    /// initial and final evaluations.
    pub eval_interval: u64,
    pub mask_policy: MaskPolicy,
    /// Regenerate each worker's sub-model mask before every batch instead
    /// of once per run.
    pub refresh_mask_per_batch: bool,
    /// Fixed number of accumulation buckets a batch is split into; the
    /// bucket layout, not the thread schedule, decides summation order.
    pub batch_buckets: usize,
    /// Parallel chunks for test-set evaluation.
    pub eval_chunks: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            eval_interval: 500,
            mask_policy: MaskPolicy::full_model(),
            refresh_mask_per_batch: false,
            batch_buckets: 1,
            eval_chunks: 8,
        }
    }
}

/// One row of the per-round log stream.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: u64,
    pub version: u64,
    pub group: usize,
    pub worker: usize,
    pub loss: f64,
    pub wall_ms: u64,
}

/// Writes round records as CSV lines.
pub fn write_round_log<W: Write>(records: &[RoundRecord], mut w: W) -> io::Result<()> {
    writeln!(w, "round,version,group,worker,loss,wall_time_ms")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.round, r.version, r.group, r.worker, r.loss, r.wall_ms
        )?;
    }
    Ok(())
}

/// Everything a finished run hands back.
#[derive(Debug)]
pub struct TrainOutcome {
    pub metrics: TrainMetrics,
    pub model: NetworkModel,
    /// The sub-model mask each worker started the run with.
    pub masks: Vec<(u32, SubModelMask)>,
    pub round_log: Vec<RoundRecord>,
}

/// One training worker: a local copy of the model, a data partition to
/// cycle through, and a sub-model mask.
pub struct Worker {
    id: usize,
    group: usize,
    model: NetworkModel,
    mask: SubModelMask,
    partition: Vec<usize>,
    cursor: usize,
    round: u64,
    seed: u64,
    batch_size: usize,
    buckets: usize,
    refresh_mask: bool,
    policy: MaskPolicy,
}

impl Worker {
    #[allow(clippy::too_many_arguments)]
    fn new(
        id: usize,
        group: usize,
        model: NetworkModel,
        mask: SubModelMask,
        partition: Vec<usize>,
        seed: u64,
        hp: &Hyperparams,
        options: &TrainOptions,
    ) -> Self {
        Worker {
            id,
            group,
            model,
            mask,
            partition,
            cursor: 0,
            round: 0,
            seed,
            batch_size: hp.batch_size,
            buckets: options.batch_buckets,
            refresh_mask: options.refresh_mask_per_batch,
            policy: options.mask_policy,
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let n = self.partition.len();
        let batch: Vec<usize> = (0..self.batch_size)
            .map(|i| self.partition[(self.cursor + i) % n])
            .collect();
        self.cursor = (self.cursor + self.batch_size) % n;
        batch
    }

    /// Loads the pulled parameters and trains one batch against them.
    pub fn run_round_inner(
        &mut self,
        params: &ParamSet,
        dataset: &Dataset,
    ) -> Result<(ParameterDelta, f64), TrainError> {
        self.model.store_mut().load_params(params);
        if self.refresh_mask {
            let rng = mask_rng(self.seed).derive(self.round);
            self.mask = generate_submodel(&self.model.layer_units(), &self.policy, self.id, &rng);
        }
        let rng = worker_round_rng(self.seed, self.id, self.round);
        let batch = self.next_batch();
        let result = train_batch(&self.model, &self.mask, dataset, &batch, &rng, self.buckets)?;
        self.round += 1;
        Ok(result)
    }
}

struct TaskAdapter<'d> {
    worker: Worker,
    dataset: &'d Dataset,
}

impl WorkerTask for TaskAdapter<'_> {
    fn worker_id(&self) -> usize {
        self.worker.id
    }

    fn run_round(
        &mut self,
        params: &ParamSet,
        _version: u64,
        _round: u64,
    ) -> Result<(ParameterDelta, f64), Box<dyn std::error::Error + Send + Sync>> {
        self.worker
            .run_round_inner(params, self.dataset)
            .map_err(|e| e.into())
    }
}

struct DriverOutput {
    server: ParameterServer<SgdMomentum>,
    round_log: Vec<RoundRecord>,
    eval_points: Vec<MetricPoint>,
    leftover_loss_sum: f64,
    leftover_loss_count: u64,
}

/// Runs `hp.max_iterations` parameter-server versions under the configured
/// sync mode, evaluating the shared snapshot every `options.eval_interval`
/// versions. One iteration is one version increment, whatever the worker
/// count.
pub fn train(
    cluster: &ClusterConfig,
    hp: &Hyperparams,
    options: &TrainOptions,
    train_set: &Dataset,
    test_set: &Dataset,
    model: NetworkModel,
) -> Result<TrainOutcome, TrainError> {
    cluster.validate()?;
    hp.validate()?;
    model.validate()?;
    let units = model.layer_units();
    for (name, set) in [("train", train_set), ("test", test_set)] {
        if set.is_empty() {
            return Err(TrainError::Data(DataError::Empty));
        }
        if set.feature_dim() != units[0] || set.n_classes() != *units.last().unwrap() {
            return Err(TrainError::Model(ModelError::ShapeMismatch(format!(
                "{name} set is {}x{} classes, model is {}x{}",
                set.feature_dim(),
                set.n_classes(),
                units[0],
                units.last().unwrap()
            ))));
        }
    }

    let k = cluster.n_workers();
    let started = Instant::now();

    let mut prng = partition_rng(cluster.seed);
    let partitions = split_dataset(train_set.len(), k, &mut prng)?;
    let mask_root = mask_rng(cluster.seed);
    let masks: Vec<SubModelMask> = (0..k)
        .map(|w| generate_submodel(&units, &options.mask_policy, w, &mask_root))
        .collect();
    let mask_record: Vec<(u32, SubModelMask)> = masks
        .iter()
        .enumerate()
        .map(|(w, m)| (w as u32, m.clone()))
        .collect();

    let mut metrics = TrainMetrics::default();
    let initial_accuracy = evaluate(&model, test_set, options.eval_chunks)?;
    metrics.points.push(MetricPoint {
        iteration: 0,
        loss: f64::NAN,
        accuracy: initial_accuracy,
        wall_ms: 0,
    });

    let mut eval_model = model.clone();
    let workers: Vec<Worker> = partitions
        .into_iter()
        .zip(masks)
        .map(|(partition, mask)| {
            Worker::new(
                partition.worker_id,
                partition.worker_id / cluster.tasks_per_group,
                model.clone(),
                mask,
                partition.indices,
                cluster.seed,
                hp,
                options,
            )
        })
        .collect();

    let server = ParameterServer::new(
        model,
        SgdMomentum { hp: *hp },
        cluster.sync_mode,
        k,
        cluster.max_staleness,
        Some(hp.max_iterations),
    );

    let output = if hp.max_iterations == 0 {
        DriverOutput {
            server,
            round_log: Vec::new(),
            eval_points: Vec::new(),
            leftover_loss_sum: 0.0,
            leftover_loss_count: 0,
        }
    } else if cluster.deterministic {
        run_deterministic(
            server, workers, cluster, hp, options, train_set, test_set, &mut eval_model,
        )?
    } else {
        run_threaded(
            server,
            workers,
            cluster,
            hp,
            options,
            train_set,
            test_set,
            &mut eval_model,
        )?
    };

    let DriverOutput {
        server,
        round_log,
        eval_points,
        leftover_loss_sum,
        leftover_loss_count,
    } = output;
    metrics.points.extend(eval_points);

    let final_version = server.version();
    let trained = server.into_model();
    if final_version > 0
        && metrics.points.last().map(|p| p.iteration) != Some(final_version)
    {
        let accuracy = evaluate(&trained, test_set, options.eval_chunks)?;
        let loss = if leftover_loss_count > 0 {
            leftover_loss_sum / leftover_loss_count as f64
        } else {
            f64::NAN
        };
        let wall_ms = if cluster.deterministic {
            0
        } else {
            started.elapsed().as_millis() as u64
        };
        metrics.points.push(MetricPoint {
            iteration: final_version,
            loss,
            accuracy,
            wall_ms,
        });
    }

    Ok(TrainOutcome {
        metrics,
        model: trained,
        masks: mask_record,
        round_log,
    })
}

#[allow(clippy::too_many_arguments, clippy::needless_range_loop)]
fn run_deterministic(
    mut server: ParameterServer<SgdMomentum>,
    mut workers: Vec<Worker>,
    cluster: &ClusterConfig,
    hp: &Hyperparams,
    options: &TrainOptions,
    train_set: &Dataset,
    test_set: &Dataset,
    eval_model: &mut NetworkModel,
) -> Result<DriverOutput, TrainError> {
    let max = hp.max_iterations;
    let interval = options.eval_interval;
    let k = workers.len();
    let mut round_log = Vec::new();
    let mut eval_points = Vec::new();
    let mut loss_sum = 0.0;
    let mut loss_count = 0u64;

    let maybe_eval = |server: &ParameterServer<SgdMomentum>,
                          eval_model: &mut NetworkModel,
                          points: &mut Vec<MetricPoint>,
                          loss_sum: &mut f64,
                          loss_count: &mut u64|
     -> Result<(), TrainError> {
        let version = server.version();
        if interval > 0 && version.is_multiple_of(interval) {
            let (snapshot, _) = server.pull();
            eval_model.store_mut().load_params(&snapshot);
            let accuracy = evaluate(eval_model, test_set, options.eval_chunks)?;
            let loss = if *loss_count > 0 {
                *loss_sum / *loss_count as f64
            } else {
                f64::NAN
            };
            points.push(MetricPoint {
                iteration: version,
                loss,
                accuracy,
                wall_ms: 0,
            });
            *loss_sum = 0.0;
            *loss_count = 0;
        }
        Ok(())
    };

    match cluster.sync_mode {
        SyncMode::AllReduce => {
            while server.version() < max {
                let mut rows: Vec<(u64, usize, usize, f64)> = Vec::with_capacity(k);
                let mut merged_version = server.version();
                for w in 0..k {
                    let (params, version) = server.pull();
                    let worker = &mut workers[w];
                    let round = worker.round;
                    let (delta, loss) = worker.run_round_inner(&params, train_set)?;
                    rows.push((round, worker.group, worker.id, loss));
                    match server.push(w, version, delta)? {
                        PushOutcome::Applied { version } => merged_version = version,
                        PushOutcome::Buffered => {}
                        other => unreachable!("unexpected push outcome {other:?}"),
                    }
                }
                for (round, group, worker, loss) in rows {
                    loss_sum += loss;
                    loss_count += 1;
                    round_log.push(RoundRecord {
                        round,
                        version: merged_version,
                        group,
                        worker,
                        loss,
                        wall_ms: 0,
                    });
                }
                maybe_eval(
                    &server,
                    eval_model,
                    &mut eval_points,
                    &mut loss_sum,
                    &mut loss_count,
                )?;
            }
        }
        SyncMode::Downpour => {
            while server.version() < max {
                let w = (server.version() % k as u64) as usize;
                let (params, version) = server.pull();
                let worker = &mut workers[w];
                let round = worker.round;
                let (delta, loss) = worker.run_round_inner(&params, train_set)?;
                match server.push(w, version, delta)? {
                    PushOutcome::Applied { version } => {
                        loss_sum += loss;
                        loss_count += 1;
                        round_log.push(RoundRecord {
                            round,
                            version,
                            group: worker.group,
                            worker: worker.id,
                            loss,
                            wall_ms: 0,
                        });
                    }
                    other => unreachable!("unexpected push outcome {other:?}"),
                }
                maybe_eval(
                    &server,
                    eval_model,
                    &mut eval_points,
                    &mut loss_sum,
                    &mut loss_count,
                )?;
            }
        }
    }

    Ok(DriverOutput {
        server,
        round_log,
        eval_points,
        leftover_loss_sum: loss_sum,
        leftover_loss_count: loss_count,
    })
}

struct PumpOutput {
    round_log: Vec<RoundRecord>,
    eval_points: Vec<MetricPoint>,
    leftover_loss_sum: f64,
    leftover_loss_count: u64,
}

/// Consumes applied-push events while the groups run: collects log rows,
/// aggregates training loss, and evaluates boundary snapshots.
fn pump_events(
    events: Receiver<ServerEvent>,
    eval_model: &mut NetworkModel,
    test_set: &Dataset,
    interval: u64,
    eval_chunks: usize,
) -> Result<PumpOutput, TrainError> {
    let mut out = PumpOutput {
        round_log: Vec::new(),
        eval_points: Vec::new(),
        leftover_loss_sum: 0.0,
        leftover_loss_count: 0,
    };
    let mut current: Option<u64> = None;
    let mut version_snapshot: Option<Arc<ParamSet>> = None;
    let mut version_wall = 0u64;

    // losses accumulate into one flat running sum in (version, worker)
    // order — the same association the deterministic driver uses
    let flush = |version: Option<u64>,
                     snapshot: Option<Arc<ParamSet>>,
                     wall: u64,
                     out: &mut PumpOutput,
                     eval_model: &mut NetworkModel|
     -> Result<(), TrainError> {
        let Some(version) = version else { return Ok(()) };
        if interval > 0 && version.is_multiple_of(interval) {
            let snapshot = snapshot.expect("boundary events keep their snapshot");
            eval_model.store_mut().load_params(&snapshot);
            let accuracy = evaluate(eval_model, test_set, eval_chunks)?;
            let loss = if out.leftover_loss_count > 0 {
                out.leftover_loss_sum / out.leftover_loss_count as f64
            } else {
                f64::NAN
            };
            out.eval_points.push(MetricPoint {
                iteration: version,
                loss,
                accuracy,
                wall_ms: wall,
            });
            out.leftover_loss_sum = 0.0;
            out.leftover_loss_count = 0;
        }
        Ok(())
    };

    for event in events.iter() {
        out.round_log.push(RoundRecord {
            round: event.round,
            version: event.version,
            group: event.group,
            worker: event.worker,
            loss: event.loss,
            wall_ms: event.wall_ms,
        });
        if current != Some(event.version) {
            flush(current, version_snapshot.take(), version_wall, &mut out, eval_model)?;
            current = Some(event.version);
            // only boundary versions need their snapshot kept alive
            version_snapshot = if interval > 0 && event.version.is_multiple_of(interval) {
                Some(Arc::clone(&event.snapshot))
            } else {
                None
            };
            version_wall = event.wall_ms;
        }
        out.leftover_loss_sum += event.loss;
        out.leftover_loss_count += 1;
    }
    flush(current, version_snapshot.take(), version_wall, &mut out, eval_model)?;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn run_threaded(
    server: ParameterServer<SgdMomentum>,
    workers: Vec<Worker>,
    cluster: &ClusterConfig,
    hp: &Hyperparams,
    options: &TrainOptions,
    train_set: &Dataset,
    test_set: &Dataset,
    eval_model: &mut NetworkModel,
) -> Result<DriverOutput, TrainError> {
    let max = hp.max_iterations;
    let mut grouped: Vec<Vec<TaskAdapter>> = (0..cluster.n_groups).map(|_| Vec::new()).collect();
    for worker in workers {
        let group = worker.group;
        grouped[group].push(TaskAdapter {
            worker,
            dataset: train_set,
        });
    }

    let (handle, events, service_join) = spawn_service(server);
    let interval = options.eval_interval;
    let eval_chunks = options.eval_chunks;

    let (group_results, pump_result) = thread::scope(|s| {
        let joins: Vec<_> = grouped
            .into_iter()
            .enumerate()
            .map(|(g, tasks)| {
                let h = handle.clone();
                s.spawn(move || run_group(g, max, tasks, &h))
            })
            .collect();
        let pump =
            s.spawn(move || pump_events(events, eval_model, test_set, interval, eval_chunks));
        let results: Vec<_> = joins
            .into_iter()
            .map(|j| j.join().expect("group thread panicked"))
            .collect();
        drop(handle);
        let pump_result = pump.join().expect("event pump panicked");
        (results, pump_result)
    });

    let server = service_join.join().expect("server thread panicked");
    for result in group_results {
        result?;
    }
    let pump = pump_result?;

    Ok(DriverOutput {
        server,
        round_log: pump.round_log,
        eval_points: pump.eval_points,
        leftover_loss_sum: pump.leftover_loss_sum,
        leftover_loss_count: pump.leftover_loss_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerSpec;
    use crate::neuron::NeuronKind;
    use crate::numeric::{ActivationKind, SplitRng};
    use ndarray::Array2;

    fn blob_dataset(seed: u64, n: usize) -> Dataset {
        let mut rng = SplitRng::new(seed);
        let centers = [[2.0, 0.0, -1.0, 0.5], [-2.0, 1.0, 1.0, -0.5], [0.0, -2.0, 0.5, 1.5]];
        let mut features = Array2::zeros((n, 4));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % 3;
            for d in 0..4 {
                features[[i, d]] = centers[class][d] + rng.next_in_range(-0.4, 0.4);
            }
            labels.push(class as u8);
        }
        Dataset::new(features, labels, 3).unwrap()
    }

    fn blob_model(seed: u64, dropout: bool) -> NetworkModel {
        let mut m = NetworkModel::new(seed);
        if dropout {
            m.add_layer(LayerSpec::dropout(4, ActivationKind::Identity, 0.9))
                .unwrap();
            m.add_layer(LayerSpec::dropout(8, ActivationKind::ReLU, 0.7))
                .unwrap();
        } else {
            m.add_layer(LayerSpec::standard(4, ActivationKind::Identity))
                .unwrap();
            m.add_layer(LayerSpec::standard(8, ActivationKind::ReLU))
                .unwrap();
        }
        m.add_layer(LayerSpec::standard(3, ActivationKind::SoftmaxOutput))
            .unwrap();
        m
    }

    fn quick_hp(iterations: u64) -> Hyperparams {
        Hyperparams {
            learning_rate: 0.1,
            momentum: 0.5,
            input_retention: 1.0,
            hidden_retention: 1.0,
            batch_size: 6,
            max_iterations: iterations,
        }
    }

    fn cluster(k: usize, mode: SyncMode, deterministic: bool) -> ClusterConfig {
        ClusterConfig {
            n_groups: k,
            tasks_per_group: 1,
            sync_mode: mode,
            deterministic,
            seed: 77,
            max_staleness: None,
        }
    }

    fn options(interval: u64) -> TrainOptions {
        TrainOptions {
            eval_interval: interval,
            ..TrainOptions::default()
        }
    }

    /// Metric equality that treats equal-bits NaN losses as equal.
    fn assert_metrics_identical(a: &TrainMetrics, b: &TrainMetrics) {
        assert_eq!(a.points.len(), b.points.len());
        for (x, y) in a.points.iter().zip(&b.points) {
            assert_eq!(x.iteration, y.iteration);
            assert_eq!(x.loss.to_bits(), y.loss.to_bits());
            assert_eq!(x.accuracy.to_bits(), y.accuracy.to_bits());
            assert_eq!(x.wall_ms, y.wall_ms);
        }
    }

    #[test]
    fn deterministic_runs_are_bit_identical() {
        let data = blob_dataset(1, 60);
        let test = blob_dataset(2, 30);
        let opts = TrainOptions {
            eval_interval: 10,
            mask_policy: MaskPolicy::new(0.2).unwrap(),
            ..TrainOptions::default()
        };
        let run = || {
            train(
                &cluster(2, SyncMode::AllReduce, true),
                &quick_hp(30),
                &opts,
                &data,
                &test,
                blob_model(5, true),
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_metrics_identical(&a.metrics, &b.metrics);
        assert_eq!(a.model.store(), b.model.store());
        assert_eq!(a.round_log, b.round_log);
        assert_eq!(a.masks, b.masks);
    }

    #[test]
    fn threaded_allreduce_matches_deterministic_content() {
        let data = blob_dataset(3, 60);
        let test = blob_dataset(4, 30);
        let opts = options(10);
        let det = train(
            &cluster(2, SyncMode::AllReduce, true),
            &quick_hp(20),
            &opts,
            &data,
            &test,
            blob_model(6, false),
        )
        .unwrap();
        let thr = train(
            &cluster(2, SyncMode::AllReduce, false),
            &quick_hp(20),
            &opts,
            &data,
            &test,
            blob_model(6, false),
        )
        .unwrap();
        // same weights, same metric content; wall time may differ
        assert_eq!(det.model.store(), thr.model.store());
        assert_eq!(det.metrics.points.len(), thr.metrics.points.len());
        for (a, b) in det.metrics.points.iter().zip(&thr.metrics.points) {
            assert_eq!(a.iteration, b.iteration);
            assert_eq!(a.accuracy.to_bits(), b.accuracy.to_bits());
            if !a.loss.is_nan() || !b.loss.is_nan() {
                assert_eq!(a.loss.to_bits(), b.loss.to_bits());
            }
        }
        // same per-worker round losses, whatever order they arrived in
        let key = |r: &RoundRecord| (r.version, r.worker, r.round, r.loss.to_bits());
        let mut a: Vec<_> = det.round_log.iter().map(key).collect();
        let mut b: Vec<_> = thr.round_log.iter().map(key).collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }

    #[test]
    fn downpour_deterministic_counts_every_version() {
        let data = blob_dataset(5, 40);
        let test = blob_dataset(6, 20);
        let out = train(
            &cluster(2, SyncMode::Downpour, true),
            &quick_hp(10),
            &options(4),
            &data,
            &test,
            blob_model(7, false),
        )
        .unwrap();
        let versions: Vec<u64> = out.round_log.iter().map(|r| r.version).collect();
        assert_eq!(versions, (1..=10).collect::<Vec<u64>>());
        assert_eq!(out.metrics.points.last().unwrap().iteration, 10);
        // round-robin: workers alternate
        let workers: Vec<usize> = out.round_log.iter().map(|r| r.worker).collect();
        assert_eq!(workers, vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1]);
    }

    #[test]
    fn threaded_downpour_two_groups_completes() {
        let data = blob_dataset(7, 40);
        let test = blob_dataset(8, 20);
        let out = train(
            &cluster(2, SyncMode::Downpour, false),
            &quick_hp(12),
            &options(0),
            &data,
            &test,
            blob_model(8, false),
        )
        .unwrap();
        assert_eq!(out.metrics.points.last().unwrap().iteration, 12);
        let mut versions: Vec<u64> = out.round_log.iter().map(|r| r.version).collect();
        versions.sort_unstable();
        assert_eq!(versions, (1..=12).collect::<Vec<u64>>());
    }

    #[test]
    fn full_retention_matches_standard_neurons_bit_exactly() {
        let data = blob_dataset(9, 60);
        let test = blob_dataset(10, 30);
        let cfg = cluster(1, SyncMode::AllReduce, true);
        let opts = options(5);
        let hp = quick_hp(15);

        let mut dropout_full = NetworkModel::new(11);
        dropout_full
            .add_layer(LayerSpec::dropout(4, ActivationKind::Identity, 1.0))
            .unwrap();
        dropout_full
            .add_layer(LayerSpec::dropout(8, ActivationKind::ReLU, 1.0))
            .unwrap();
        dropout_full
            .add_layer(LayerSpec::standard(3, ActivationKind::SoftmaxOutput))
            .unwrap();

        let a = train(&cfg, &hp, &opts, &data, &test, dropout_full).unwrap();
        let b = train(&cfg, &hp, &opts, &data, &test, blob_model(11, false)).unwrap();
        assert_eq!(a.model.store(), b.model.store());
        assert_metrics_identical(&a.metrics, &b.metrics);
    }

    #[test]
    fn zero_iterations_metrics_has_only_initial_point() {
        let data = blob_dataset(12, 20);
        let test = blob_dataset(13, 10);
        let out = train(
            &cluster(1, SyncMode::AllReduce, true),
            &quick_hp(0),
            &options(5),
            &data,
            &test,
            blob_model(12, false),
        )
        .unwrap();
        assert_eq!(out.metrics.points.len(), 1);
        assert_eq!(out.metrics.points[0].iteration, 0);
        assert!(out.metrics.points[0].loss.is_nan());
        assert!(out.round_log.is_empty());
    }

    #[test]
    fn training_improves_blob_accuracy() {
        let data = blob_dataset(14, 90);
        let test = blob_dataset(15, 45);
        let out = train(
            &cluster(1, SyncMode::AllReduce, true),
            &quick_hp(120),
            &options(0),
            &data,
            &test,
            blob_model(14, false),
        )
        .unwrap();
        let first = out.metrics.points.first().unwrap().accuracy;
        let last = out.metrics.points.last().unwrap().accuracy;
        assert!(last > 0.9, "final accuracy {last} (initial {first})");
    }

    #[test]
    fn dropout_layers_have_standard_output_kind() {
        // guard: blob_model(dropout=true) keeps the output layer standard
        let m = blob_model(1, true);
        assert!(matches!(
            m.layers().last().unwrap().neuron_kind,
            NeuronKind::Standard
        ));
    }
}
