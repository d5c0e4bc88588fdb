//! Data partitioning across workers and irregular sub-model generation.
//!
//! A sub-model is a sparse subgraph of the parent network described by a
//! per-connection boolean mask. Workers train different sub-models that
//! share the parent's weight storage; dropped connections carry no
//! messages and receive no gradients.

use crate::model::{ParameterDelta, WeightStore};
use crate::neuron::{BackwardMessage, ForwardMessage};
use crate::numeric::SplitRng;
use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PartitionError {
    #[error("{examples} examples cannot be split across {workers} workers")]
    TooFewExamples { examples: usize, workers: usize },
    #[error("mask shape does not match the weight store at pair {pair}")]
    MaskShapeMismatch { pair: usize },
    #[error("drop probability {0} must lie in [0, 1)")]
    InvalidDropProbability(f64),
}

/// The slice of the training set owned by one worker.
#[derive(Debug, Clone, PartialEq)]
pub struct DataPartition {
    pub worker_id: usize,
    pub indices: Vec<usize>,
}

/// Shuffles example indices and deals them round-robin, so partitions are
/// disjoint, cover the dataset, and differ in size by at most one.
pub fn split_dataset(
    n_examples: usize,
    n_workers: usize,
    rng: &mut SplitRng,
) -> Result<Vec<DataPartition>, PartitionError> {
    assert!(n_workers >= 1, "at least one worker");
    if n_examples < n_workers {
        return Err(PartitionError::TooFewExamples {
            examples: n_examples,
            workers: n_workers,
        });
    }
    let mut order: Vec<usize> = (0..n_examples).collect();
    rng.shuffle(&mut order);
    let mut partitions: Vec<DataPartition> = (0..n_workers)
        .map(|worker_id| DataPartition {
            worker_id,
            indices: Vec::with_capacity(n_examples / n_workers + 1),
        })
        .collect();
    for (i, example) in order.into_iter().enumerate() {
        partitions[i % n_workers].indices.push(example);
    }
    Ok(partitions)
}

/// Sub-model selection policy: every connection is independently dropped
/// with this probability, then the mask is repaired so it stays trainable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskPolicy {
    pub connection_drop_probability: f64,
}

impl MaskPolicy {
    pub fn new(connection_drop_probability: f64) -> Result<Self, PartitionError> {
        if (0.0..1.0).contains(&connection_drop_probability) {
            Ok(MaskPolicy {
                connection_drop_probability,
            })
        } else {
            Err(PartitionError::InvalidDropProbability(
                connection_drop_probability,
            ))
        }
    }

    pub fn full_model() -> Self {
        MaskPolicy {
            connection_drop_probability: 0.0,
        }
    }
}

/// Boolean per-connection mask selecting a sparse sub-model of the parent.
///
/// Invariants after generation:
/// - every output neuron keeps at least one incoming connection;
/// - every hidden neuron is either fully isolated (no edges at all) or has
///   at least one retained incoming and one retained outgoing connection.
#[derive(Debug, Clone, PartialEq)]
pub struct SubModelMask {
    /// One boolean matrix per adjacent layer pair, shaped like the weights.
    pub retain: Vec<Array2<bool>>,
}

impl SubModelMask {
    /// The trivial mask retaining every connection of the parent.
    pub fn full(layer_units: &[usize]) -> Self {
        let retain = layer_units
            .windows(2)
            .map(|p| Array2::from_elem((p[1], p[0]), true))
            .collect();
        SubModelMask { retain }
    }

    pub fn layer_units(&self) -> Vec<usize> {
        let mut units = Vec::with_capacity(self.retain.len() + 1);
        if let Some(first) = self.retain.first() {
            units.push(first.ncols());
        }
        for m in &self.retain {
            units.push(m.nrows());
        }
        units
    }

    pub fn is_full(&self) -> bool {
        self.retain.iter().all(|m| m.iter().all(|&b| b))
    }

    pub fn retained_edges(&self) -> usize {
        self.retain
            .iter()
            .map(|m| m.iter().filter(|&&b| b).count())
            .sum()
    }

    pub fn total_edges(&self) -> usize {
        self.retain.iter().map(|m| m.len()).sum()
    }

    fn incoming_count(&self, layer: usize, neuron: usize) -> usize {
        self.retain[layer - 1]
            .row(neuron)
            .iter()
            .filter(|&&b| b)
            .count()
    }

    fn outgoing_count(&self, layer: usize, neuron: usize) -> usize {
        self.retain[layer]
            .column(neuron)
            .iter()
            .filter(|&&b| b)
            .count()
    }

    /// Checks the connectivity invariants, returning a description of the
    /// first violation found.
    #[allow(clippy::needless_range_loop)]
    pub fn check_invariants(&self) -> Result<(), String> {
        let units = self.layer_units();
        let n_layers = units.len();
        if n_layers < 2 {
            return Ok(());
        }
        for j in 0..units[n_layers - 1] {
            if self.incoming_count(n_layers - 1, j) == 0 {
                return Err(format!("output neuron {j} has no incoming connections"));
            }
        }
        for l in 1..n_layers - 1 {
            for j in 0..units[l] {
                let inc = self.incoming_count(l, j);
                let out = self.outgoing_count(l, j);
                let isolated = inc == 0 && out == 0;
                if !isolated && (inc == 0 || out == 0) {
                    return Err(format!(
                        "hidden neuron ({l}, {j}) is one-sided: {inc} in, {out} out"
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Generates a worker's irregular sub-model: independent Bernoulli edge
/// retention followed by a repair pass restoring the mask invariants.
///
/// Deterministic in `(rng, worker_id)`: the same inputs always produce the
/// same mask.
pub fn generate_submodel(
    layer_units: &[usize],
    policy: &MaskPolicy,
    worker_id: usize,
    rng: &SplitRng,
) -> SubModelMask {
    let mut mask = SubModelMask::full(layer_units);
    if policy.connection_drop_probability == 0.0 {
        return mask;
    }
    let keep = 1.0 - policy.connection_drop_probability;
    let worker_rng = rng.derive(worker_id as u64);
    for (pair, retain) in mask.retain.iter_mut().enumerate() {
        let mut edge_rng = worker_rng.derive(pair as u64);
        for b in retain.iter_mut() {
            *b = edge_rng.next_f64() < keep;
        }
    }
    repair(&mut mask, &mut worker_rng.derive(u64::MAX));
    debug_assert!(mask.check_invariants().is_ok());
    mask
}

/// Repair pass:
/// - a hidden neuron with edges on only one side loses all its edges
///   (becomes isolated); this cascades until stable;
/// - an output neuron with no incoming edges gets one re-enabled from a
///   live previous-layer neuron, resurrecting a chain from the input layer
///   if an entire layer went dark.
#[allow(clippy::needless_range_loop)]
fn repair(mask: &mut SubModelMask, rng: &mut SplitRng) {
    let units = mask.layer_units();
    let n_layers = units.len();

    loop {
        let mut changed = false;
        for l in 1..n_layers.saturating_sub(1) {
            for j in 0..units[l] {
                let inc = mask.incoming_count(l, j);
                let out = mask.outgoing_count(l, j);
                if (inc == 0) != (out == 0) {
                    for b in mask.retain[l - 1].row_mut(j) {
                        *b = false;
                    }
                    for b in mask.retain[l].column_mut(j) {
                        *b = false;
                    }
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }

    for j in 0..units[n_layers - 1] {
        if mask.incoming_count(n_layers - 1, j) == 0 {
            let source = live_source(mask, n_layers - 2, rng);
            mask.retain[n_layers - 2][[j, source]] = true;
        }
    }
}

/// Picks a neuron in `layer` that can legally source a new edge: any input
/// neuron, or a hidden neuron that already has an incoming connection. If
/// none exists the layer is resurrected by wiring one neuron back to a
/// live source below it.
fn live_source(mask: &mut SubModelMask, layer: usize, rng: &mut SplitRng) -> usize {
    let units = mask.layer_units();
    if layer == 0 {
        return rng.next_index(units[0]);
    }
    let live: Vec<usize> = (0..units[layer])
        .filter(|&j| mask.incoming_count(layer, j) > 0)
        .collect();
    if !live.is_empty() {
        return live[rng.next_index(live.len())];
    }
    let chosen = rng.next_index(units[layer]);
    let below = live_source(mask, layer - 1, rng);
    mask.retain[layer - 1][[chosen, below]] = true;
    chosen
}

/// Read access to the parent's weights through a sub-model mask: retained
/// connections see the shared parent value, dropped connections read as
/// absent. Message iterators for the neuron-centric passes are built here
/// so they touch only retained edges.
pub struct MaskedWeightView<'a> {
    weights: &'a [Array2<f64>],
    mask: &'a SubModelMask,
}

impl<'a> MaskedWeightView<'a> {
    pub fn new(store: &'a WeightStore, mask: &'a SubModelMask) -> Result<Self, PartitionError> {
        if store.weights.len() != mask.retain.len() {
            return Err(PartitionError::MaskShapeMismatch {
                pair: store.weights.len().min(mask.retain.len()),
            });
        }
        for (pair, (w, m)) in store.weights.iter().zip(&mask.retain).enumerate() {
            if w.dim() != m.dim() {
                return Err(PartitionError::MaskShapeMismatch { pair });
            }
        }
        Ok(MaskedWeightView {
            weights: &store.weights,
            mask,
        })
    }

    /// The parent weight for a retained connection, `None` for a dropped one.
    #[inline]
    pub fn weight(&self, pair: usize, to: usize, from: usize) -> Option<f64> {
        if self.mask.retain[pair][[to, from]] {
            Some(self.weights[pair][[to, from]])
        } else {
            None
        }
    }

    /// Forward messages into neuron `to` of layer `pair + 1`, one per
    /// retained incoming connection.
    #[inline]
    pub fn forward_messages<'b>(
        &self,
        pair: usize,
        to: usize,
        inputs: &'b [f64],
    ) -> impl Iterator<Item = ForwardMessage> + 'b
    where
        'a: 'b,
    {
        let weights = self.weights[pair]
            .row(to)
            .to_slice()
            .expect("weights are standard layout");
        let retain = self.mask.retain[pair]
            .row(to)
            .to_slice()
            .expect("mask is standard layout");
        weights
            .iter()
            .zip(retain)
            .zip(inputs)
            .enumerate()
            .filter_map(|(i, ((&w, &keep), &x))| {
                keep.then_some(ForwardMessage {
                    source_index: i,
                    input: x,
                    weight: w,
                })
            })
    }

    /// Backward messages into neuron `from` of layer `pair`, one per
    /// retained outgoing connection, pairing the next layer's deltas with
    /// the connecting weights.
    #[inline]
    pub fn backward_messages<'b>(
        &self,
        pair: usize,
        from: usize,
        next_deltas: &'b [f64],
    ) -> impl Iterator<Item = BackwardMessage> + 'b
    where
        'a: 'b,
    {
        let weights = self.weights[pair].column(from);
        let retain = self.mask.retain[pair].column(from);
        weights
            .into_iter()
            .zip(retain)
            .zip(next_deltas)
            .enumerate()
            .filter_map(|(j, ((&w, &keep), &d))| {
                keep.then_some(BackwardMessage {
                    source_index: j,
                    delta: d,
                    weight: w,
                })
            })
    }

    /// The stored `(source index, input)` pairs neuron `to` consumed along
    /// retained connections; feeds the weight-gradient computation.
    #[inline]
    pub fn incoming_inputs<'b>(
        &self,
        pair: usize,
        to: usize,
        inputs: &'b [f64],
    ) -> impl Iterator<Item = (usize, f64)> + 'b
    where
        'a: 'b,
    {
        let retain = self.mask.retain[pair]
            .row(to)
            .to_slice()
            .expect("mask is standard layout");
        retain
            .iter()
            .zip(inputs)
            .enumerate()
            .filter_map(|(i, (&keep, &x))| keep.then_some((i, x)))
    }
}

/// Write access for gradients under a mask: writes along retained edges
/// land in the parent-shaped delta, writes along dropped edges are refused.
pub struct GradientSink<'a> {
    delta: &'a mut ParameterDelta,
    mask: &'a SubModelMask,
}

impl<'a> GradientSink<'a> {
    pub fn new(
        delta: &'a mut ParameterDelta,
        mask: &'a SubModelMask,
    ) -> Result<Self, PartitionError> {
        if delta.weights.len() != mask.retain.len() {
            return Err(PartitionError::MaskShapeMismatch {
                pair: delta.weights.len().min(mask.retain.len()),
            });
        }
        for (pair, (w, m)) in delta.weights.iter().zip(&mask.retain).enumerate() {
            if w.dim() != m.dim() {
                return Err(PartitionError::MaskShapeMismatch { pair });
            }
        }
        Ok(GradientSink { delta, mask })
    }

    /// Accumulates a weight gradient; returns false (writing nothing) if
    /// the edge is dropped.
    #[inline]
    pub fn add_weight_gradient(&mut self, pair: usize, to: usize, from: usize, g: f64) -> bool {
        if self.mask.retain[pair][[to, from]] {
            self.delta.weights[pair][[to, from]] += g;
            true
        } else {
            false
        }
    }

    #[inline]
    pub fn add_bias_gradient(&mut self, pair: usize, to: usize, g: f64) {
        self.delta.biases[pair][to] += g;
    }
}
