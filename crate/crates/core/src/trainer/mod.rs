//! The optimization loop: mini-batch SGD with classical momentum, batch
//! gradient averaging, dropout training, and evaluation.

mod driver;

pub use driver::{train, write_round_log, RoundRecord, TrainOptions, TrainOutcome, Worker};

use crate::cluster::{ClusterError, UpdateRule};
use crate::data::{DataError, Dataset};
use crate::model::{ModelError, Mode, NetworkModel, ParameterDelta};
use crate::numeric::SplitRng;
use crate::partition::{PartitionError, SubModelMask};
use crate::streams;
use std::io::{self, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error("non-finite update for {param}")]
    NonFiniteUpdate { param: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Training constants. Retentions are keep-probabilities: a unit survives
/// a training step with probability `retention`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub momentum: f64,
    pub input_retention: f64,
    pub hidden_retention: f64,
    pub batch_size: usize,
    pub max_iterations: u64,
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidHyperparams(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::InvalidHyperparams(format!(
                "momentum {} must lie in [0, 1)",
                self.momentum
            )));
        }
        for (name, r) in [
            ("input retention", self.input_retention),
            ("hidden retention", self.hidden_retention),
        ] {
            if !(r > 0.0 && r <= 1.0) {
                return Err(TrainError::InvalidHyperparams(format!(
                    "{name} {r} outside (0, 1]"
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidHyperparams(
                "batch size must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Dampened momentum step: `velocity <- momentum * velocity +
/// (1 - momentum) * learning_rate * gradient`, then
/// `parameter <- parameter - velocity`. Gradients are loss gradients
/// (descent direction is their negative).
///
/// The damping factor keeps the steady-state step at `learning_rate *
/// gradient` whatever the momentum; the undamped placement multiplies the
/// effective step by `1/(1 - momentum)`, which at momentum 0.98 turns a
/// 0.3 learning rate into an unstable effective 15.
pub fn sgd_momentum_step(
    model: &mut NetworkModel,
    delta: &ParameterDelta,
    hp: &Hyperparams,
) -> Result<(), TrainError> {
    if delta.layer_units() != model.layer_units() {
        return Err(TrainError::Model(ModelError::ShapeMismatch(
            "delta shape does not match model".into(),
        )));
    }
    let alpha = hp.momentum;
    let eta = (1.0 - hp.momentum) * hp.learning_rate;
    let bias_enabled = model.bias_enabled();
    let store = model.store_mut();
    for pair in 0..store.weights.len() {
        {
            let w = &mut store.weights[pair];
            let v = &mut store.weight_velocity[pair];
            let g = &delta.weights[pair];
            for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
                *v = alpha * *v + eta * *g;
                *w -= *v;
                if !w.is_finite() {
                    return Err(TrainError::NonFiniteUpdate {
                        param: format!("weights[{pair}]"),
                    });
                }
            }
        }
        if bias_enabled {
            let b = &mut store.biases[pair];
            let v = &mut store.bias_velocity[pair];
            let g = &delta.biases[pair];
            for ((b, v), g) in b.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
                *v = alpha * *v + eta * *g;
                *b -= *v;
                if !b.is_finite() {
                    return Err(TrainError::NonFiniteUpdate {
                        param: format!("biases[{pair}]"),
                    });
                }
            }
        }
    }
    Ok(())
}

/// The update rule the parameter server applies: one momentum step per
/// merged delta.
pub struct SgdMomentum {
    pub hp: Hyperparams,
}

impl UpdateRule for SgdMomentum {
    fn apply(&mut self, model: &mut NetworkModel, delta: &ParameterDelta) -> Result<(), String> {
        sgd_momentum_step(model, delta, &self.hp).map_err(|e| e.to_string())
    }
}

/// The random stream a worker uses for its `round`-th batch. Exposed so a
/// sequential reference loop can reproduce the cluster's exact draws.
pub fn worker_round_rng(seed: u64, worker: usize, round: u64) -> SplitRng {
    SplitRng::new(seed)
        .derive(streams::WORKER)
        .derive(worker as u64)
        .derive(round)
}

/// The stream dataset partitioning draws from.
pub fn partition_rng(seed: u64) -> SplitRng {
    SplitRng::new(seed).derive(streams::PARTITION)
}

/// The root stream sub-model masks derive from; `generate_submodel` mixes
/// in the worker id itself.
pub fn mask_rng(seed: u64) -> SplitRng {
    SplitRng::new(seed).derive(streams::MASKS)
}

/// Runs one mini-batch: per example a training-mode forward pass (fresh
/// dropout draws per example) and a backward pass, gradients and loss
/// averaged over the batch.
///
/// `buckets` fixes how many accumulation buckets the batch is split into;
/// buckets are summed in index order, so the result does not depend on
/// how threads get scheduled.
pub fn train_batch(
    model: &NetworkModel,
    mask: &SubModelMask,
    dataset: &Dataset,
    batch: &[usize],
    rng: &SplitRng,
    buckets: usize,
) -> Result<(ParameterDelta, f64), TrainError> {
    assert!(!batch.is_empty(), "batch must be non-empty");
    let buckets = buckets.max(1).min(batch.len());
    let units = model.layer_units();
    let n_classes = dataset.n_classes();

    let run_bucket = |range: std::ops::Range<usize>| -> Result<(ParameterDelta, f64), TrainError> {
        let mut delta = ParameterDelta::zeros(&units);
        let mut loss_sum = 0.0;
        let mut target = vec![0.0; n_classes];
        for slot in range {
            let example_rng = rng.derive(slot as u64);
            let (features, label) = dataset.example(batch[slot]);
            let (_, trace) = model.feed_forward(mask, features, Mode::Training, &example_rng)?;
            target[label] = 1.0;
            let loss = model.back_propagate_into(mask, &trace, &target, &mut delta)?;
            target[label] = 0.0;
            loss_sum += loss;
        }
        Ok((delta, loss_sum))
    };

    let per_bucket = batch.len().div_ceil(buckets);
    let ranges: Vec<std::ops::Range<usize>> = (0..buckets)
        .map(|b| (b * per_bucket).min(batch.len())..((b + 1) * per_bucket).min(batch.len()))
        .filter(|r| !r.is_empty())
        .collect();

    let results: Vec<Result<(ParameterDelta, f64), TrainError>> = if ranges.len() == 1 {
        vec![run_bucket(ranges[0].clone())]
    } else {
        std::thread::scope(|s| {
            let joins: Vec<_> = ranges
                .iter()
                .map(|r| {
                    let r = r.clone();
                    let run_bucket = &run_bucket;
                    s.spawn(move || run_bucket(r))
                })
                .collect();
            joins
                .into_iter()
                .map(|j| j.join().expect("batch bucket panicked"))
                .collect()
        })
    };

    let mut merged: Option<ParameterDelta> = None;
    let mut loss_sum = 0.0;
    for result in results {
        let (delta, loss) = result?;
        loss_sum += loss;
        match &mut merged {
            None => merged = Some(delta),
            Some(m) => m.add_assign(&delta),
        }
    }
    let mut delta = merged.expect("at least one bucket");
    let n = batch.len() as f64;
    delta.scale(1.0 / n);
    Ok((delta, loss_sum / n))
}

/// Fraction of examples whose prediction matches the label. Inference
/// mode, full parent model. Chunk counts are integers, so the result is
/// independent of how many chunks run in parallel.
pub fn evaluate(model: &NetworkModel, test: &Dataset, chunks: usize) -> Result<f64, TrainError> {
    assert!(!test.is_empty(), "test set must be non-empty");
    let mask = SubModelMask::full(&model.layer_units());
    let rng = SplitRng::new(0);
    let chunks = chunks.max(1).min(test.len());
    let per_chunk = test.len().div_ceil(chunks);

    let count_range = |range: std::ops::Range<usize>| -> Result<usize, TrainError> {
        let mut correct = 0;
        for i in range {
            let (features, label) = test.example(i);
            let (output, _) = model.feed_forward(&mask, features, Mode::Inference, &rng)?;
            if crate::model::argmax(&output) == label {
                correct += 1;
            }
        }
        Ok(correct)
    };

    let ranges: Vec<std::ops::Range<usize>> = (0..chunks)
        .map(|c| (c * per_chunk).min(test.len())..((c + 1) * per_chunk).min(test.len()))
        .filter(|r| !r.is_empty())
        .collect();

    let total: Result<usize, TrainError> = if ranges.len() == 1 {
        count_range(ranges[0].clone())
    } else {
        std::thread::scope(|s| {
            let joins: Vec<_> = ranges
                .iter()
                .map(|r| {
                    let r = r.clone();
                    let count_range = &count_range;
                    s.spawn(move || count_range(r))
                })
                .collect();
            joins
                .into_iter()
                .map(|j| j.join().expect("eval chunk panicked"))
                .try_fold(0usize, |acc, r| r.map(|c| acc + c))
        })
    };

    Ok(total? as f64 / test.len() as f64)
}

/// One evaluation point of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricPoint {
    pub iteration: u64,
    /// Mean training loss over the batches applied since the previous
    /// point; NaN for the initial point.
    pub loss: f64,
    pub accuracy: f64,
    pub wall_ms: u64,
}

/// The accuracy-versus-iteration curve of a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainMetrics {
    pub points: Vec<MetricPoint>,
}

impl TrainMetrics {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.points.last().map(|p| p.accuracy)
    }

    pub fn to_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "iteration,loss,accuracy,wall_ms")?;
        for p in &self.points {
            writeln!(w, "{},{},{},{}", p.iteration, p.loss, p.accuracy, p.wall_ms)?;
        }
        Ok(())
    }
}
