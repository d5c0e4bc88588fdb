//! Layered network construction and the neuron-centric forward/backward
//! passes.
//!
//! A [`NetworkModel`] is an ordered list of [`LayerSpec`]s plus a
//! [`WeightStore`] holding the parent parameters. Passes walk the layers
//! in order; within a layer every neuron consumes its messages
//! independently, and a layer completes before the next begins.

pub mod checkpoint;
mod delta;

pub use delta::ParameterDelta;

use crate::neuron::{
    dropout_forward, interlayer_normalize, interlayer_normalize_backward, standard_backward,
    standard_forward, ForwardMessage, NeuronContext, NeuronError, NeuronKind,
};
use crate::numeric::{cross_entropy, softmax, ActivationKind, NumericError, SplitRng};
use crate::partition::{MaskedWeightView, PartitionError, SubModelMask};
use crate::streams;
use ndarray::{Array1, Array2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid layer: {0}")]
    InvalidLayer(String),
    #[error("model needs at least two layers, has {0}")]
    TooFewLayers(usize),
    #[error("output layer must use standard neurons")]
    DropoutOutputLayer,
    #[error("training requires a softmax output head, found {0}")]
    UnsupportedOutputHead(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward requires a trace from a training-mode forward pass")]
    TraceModeMismatch,
    #[error(transparent)]
    Neuron(#[from] NeuronError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
}

/// One layer of the architecture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSpec {
    pub units: usize,
    pub activation: ActivationKind,
    pub neuron_kind: NeuronKind,
    /// Apply divide-by-sum normalization to this layer's outputs.
    pub normalize: bool,
}

impl LayerSpec {
    pub fn standard(units: usize, activation: ActivationKind) -> Self {
        LayerSpec {
            units,
            activation,
            neuron_kind: NeuronKind::Standard,
            normalize: false,
        }
    }

    pub fn dropout(units: usize, activation: ActivationKind, retention: f64) -> Self {
        LayerSpec {
            units,
            activation,
            neuron_kind: NeuronKind::Dropout { retention },
            normalize: false,
        }
    }

    pub fn with_normalize(mut self) -> Self {
        self.normalize = true;
        self
    }
}

/// Parent model parameters: per adjacent layer pair, a weight matrix shaped
/// `units(l+1) x units(l)`, a bias vector, and momentum velocities of the
/// same shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStore {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub weight_velocity: Vec<Array2<f64>>,
    pub bias_velocity: Vec<Array1<f64>>,
}

impl WeightStore {
    fn empty() -> Self {
        WeightStore {
            weights: Vec::new(),
            biases: Vec::new(),
            weight_velocity: Vec::new(),
            bias_velocity: Vec::new(),
        }
    }

    fn add_pair(&mut self, n_out: usize, n_in: usize, rng: &mut SplitRng) {
        // uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)], biases zero
        let bound = 1.0 / (n_in as f64).sqrt();
        self.weights.push(Array2::from_shape_fn((n_out, n_in), |_| {
            rng.next_in_range(-bound, bound)
        }));
        self.biases.push(Array1::zeros(n_out));
        self.weight_velocity.push(Array2::zeros((n_out, n_in)));
        self.bias_velocity.push(Array1::zeros(n_out));
    }

    /// Snapshot of the trainable parameters (no velocities).
    pub fn params(&self) -> ParamSet {
        ParamSet {
            weights: self.weights.clone(),
            biases: self.biases.clone(),
        }
    }

    /// Overwrites the trainable parameters from a snapshot.
    pub fn load_params(&mut self, params: &ParamSet) {
        assert_eq!(self.weights.len(), params.weights.len(), "pair count");
        for (dst, src) in self.weights.iter_mut().zip(&params.weights) {
            dst.assign(src);
        }
        for (dst, src) in self.biases.iter_mut().zip(&params.biases) {
            dst.assign(src);
        }
    }
}

/// Trainable parameters as pulled from the parameter server.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Training,
    Inference,
}

/// Everything the backward pass needs from a forward pass: per-layer
/// emissions, dropout masks, and the final output distribution.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub mode: Mode,
    /// Raw per-layer emissions (post dropout mask, pre normalization).
    pub emitted: Vec<Vec<f64>>,
    /// Normalized outputs for layers with the normalize flag.
    pub normalized: Vec<Option<Vec<f64>>>,
    /// Per-neuron mask values as cached by the forward pass.
    pub masks: Vec<Vec<f64>>,
    /// Output distribution after the softmax head.
    pub output: Vec<f64>,
}

impl ForwardTrace {
    /// The values layer `l+1` consumed from layer `l`.
    pub fn layer_output(&self, layer: usize) -> &[f64] {
        match &self.normalized[layer] {
            Some(v) => v,
            None => &self.emitted[layer],
        }
    }
}

/// A layered neural network with shared parent parameters.
#[derive(Debug, Clone)]
pub struct NetworkModel {
    layers: Vec<LayerSpec>,
    store: WeightStore,
    bias_enabled: bool,
    seed: u64,
}

impl NetworkModel {
    pub fn new(seed: u64) -> Self {
        NetworkModel {
            layers: Vec::new(),
            store: WeightStore::empty(),
            bias_enabled: true,
            seed,
        }
    }

    pub fn with_bias(mut self, enabled: bool) -> Self {
        self.bias_enabled = enabled;
        self
    }

    /// Appends a layer. With a previous layer present this allocates and
    /// initializes the connecting weights, biases and velocities.
    pub fn add_layer(&mut self, spec: LayerSpec) -> Result<&mut Self, ModelError> {
        if spec.units == 0 {
            return Err(ModelError::InvalidLayer("layer has zero units".into()));
        }
        if let NeuronKind::Dropout { retention } = spec.neuron_kind {
            if !(retention > 0.0 && retention <= 1.0) {
                return Err(ModelError::InvalidLayer(format!(
                    "dropout retention {retention} outside (0, 1]"
                )));
            }
        }
        if let Some(prev) = self.layers.last() {
            let pair = self.store.weights.len() as u64;
            let mut rng = SplitRng::new(self.seed)
                .derive(streams::WEIGHT_INIT)
                .derive(pair);
            self.store.add_pair(spec.units, prev.units, &mut rng);
        }
        self.layers.push(spec);
        Ok(self)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Per-layer unit counts, input first.
    pub fn layer_units(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.units).collect()
    }

    pub fn store(&self) -> &WeightStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut WeightStore {
        &mut self.store
    }

    pub fn bias_enabled(&self) -> bool {
        self.bias_enabled
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub(crate) fn from_parts(
        layers: Vec<LayerSpec>,
        store: WeightStore,
        bias_enabled: bool,
        seed: u64,
    ) -> Self {
        NetworkModel {
            layers,
            store,
            bias_enabled,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers.len() < 2 {
            return Err(ModelError::TooFewLayers(self.layers.len()));
        }
        let last = self.layers.last().unwrap();
        if !matches!(last.neuron_kind, NeuronKind::Standard) {
            return Err(ModelError::DropoutOutputLayer);
        }
        Ok(())
    }

    /// Runs the layers in order, each neuron consuming messages only along
    /// mask-retained connections. The output layer applies its softmax
    /// head; the returned trace is sufficient to run [`Self::back_propagate`].
    pub fn feed_forward(
        &self,
        mask: &SubModelMask,
        input: &[f64],
        mode: Mode,
        rng: &SplitRng,
    ) -> Result<(Vec<f64>, ForwardTrace), ModelError> {
        self.validate()?;
        let n_layers = self.layers.len();
        if input.len() != self.layers[0].units {
            return Err(ModelError::ShapeMismatch(format!(
                "input has {} values, input layer has {} units",
                input.len(),
                self.layers[0].units
            )));
        }
        let view = MaskedWeightView::new(&self.store, mask)?;
        let training = mode == Mode::Training;

        let mut trace = ForwardTrace {
            mode,
            emitted: Vec::with_capacity(n_layers),
            normalized: vec![None; n_layers],
            masks: Vec::with_capacity(n_layers),
            output: Vec::new(),
        };

        // Input layer: each neuron forwards its raw value as a single
        // synthetic unit-weight message, so dropout behaves uniformly.
        {
            let spec = self.layers[0];
            let layer_rng = rng.derive(0);
            let mut emitted = vec![0.0; spec.units];
            let mut masks = vec![1.0; spec.units];
            for (i, value) in input.iter().enumerate() {
                let mut ctx = NeuronContext::new((0, i), spec.activation, training);
                let message = std::iter::once(ForwardMessage {
                    source_index: i,
                    input: *value,
                    weight: 1.0,
                });
                emitted[i] = match spec.neuron_kind {
                    NeuronKind::Standard => standard_forward(&mut ctx, message, 0.0)?,
                    NeuronKind::Dropout { retention } => {
                        let mut nrng = layer_rng.derive(i as u64);
                        dropout_forward(&mut ctx, message, 0.0, retention, &mut nrng)?
                    }
                };
                masks[i] = ctx.cached_mask;
            }
            if spec.normalize {
                trace.normalized[0] = Some(interlayer_normalize(&emitted));
            }
            trace.emitted.push(emitted);
            trace.masks.push(masks);
        }

        for l in 1..n_layers {
            let spec = self.layers[l];
            let pair = l - 1;
            let layer_rng = rng.derive(l as u64);
            let prev = trace.layer_output(l - 1).to_vec();
            let mut emitted = vec![0.0; spec.units];
            let mut masks = vec![1.0; spec.units];
            for j in 0..spec.units {
                let bias = if self.bias_enabled {
                    self.store.biases[pair][j]
                } else {
                    0.0
                };
                let mut ctx = NeuronContext::new((l, j), spec.activation, training);
                let messages = view.forward_messages(pair, j, &prev);
                emitted[j] = match spec.neuron_kind {
                    NeuronKind::Standard => standard_forward(&mut ctx, messages, bias)?,
                    NeuronKind::Dropout { retention } => {
                        let mut nrng = layer_rng.derive(j as u64);
                        dropout_forward(&mut ctx, messages, bias, retention, &mut nrng)?
                    }
                };
                masks[j] = ctx.cached_mask;
            }
            if spec.normalize {
                trace.normalized[l] = Some(interlayer_normalize(&emitted));
            }
            trace.emitted.push(emitted);
            trace.masks.push(masks);
        }

        let head = self.layers[n_layers - 1];
        let last_values = trace.layer_output(n_layers - 1);
        trace.output = if head.activation == ActivationKind::SoftmaxOutput {
            softmax(last_values)
        } else {
            last_values.to_vec()
        };
        Ok((trace.output.clone(), trace))
    }

    /// Backward pass over a training trace: cross-entropy loss, fused
    /// softmax output deltas, then per-neuron backward steps along
    /// mask-retained connections. Returns the loss and the gradients.
    pub fn back_propagate(
        &self,
        mask: &SubModelMask,
        trace: &ForwardTrace,
        target: &[f64],
    ) -> Result<(f64, ParameterDelta), ModelError> {
        let mut delta = ParameterDelta::zeros(&self.layer_units());
        let loss = self.back_propagate_into(mask, trace, target, &mut delta)?;
        Ok((loss, delta))
    }

    /// As [`Self::back_propagate`], but accumulates into an existing delta,
    /// adding one to its sample count. Lets a batch share one accumulator.
    pub fn back_propagate_into(
        &self,
        mask: &SubModelMask,
        trace: &ForwardTrace,
        target: &[f64],
        delta: &mut ParameterDelta,
    ) -> Result<f64, ModelError> {
        self.validate()?;
        if trace.mode != Mode::Training {
            return Err(ModelError::TraceModeMismatch);
        }
        let n_layers = self.layers.len();
        let head = self.layers[n_layers - 1];
        if head.activation != ActivationKind::SoftmaxOutput {
            return Err(ModelError::UnsupportedOutputHead(head.activation.name()));
        }
        if target.len() != head.units {
            return Err(ModelError::ShapeMismatch(format!(
                "target has {} entries, output layer has {} units",
                target.len(),
                head.units
            )));
        }
        if delta.layer_units() != self.layer_units() {
            return Err(ModelError::ShapeMismatch(
                "delta shape does not match model".into(),
            ));
        }
        let view = MaskedWeightView::new(&self.store, mask)?;

        let loss = cross_entropy(&trace.output, target)?;

        // Softmax + cross-entropy fuse to (output - target) at the head.
        let mut deltas: Vec<f64> = trace
            .output
            .iter()
            .zip(target)
            .map(|(p, t)| p - t)
            .collect();
        if head.normalize {
            deltas = interlayer_normalize_backward(&deltas, &trace.emitted[n_layers - 1]);
        }

        // Output layer gradients.
        {
            let pair = n_layers - 2;
            let prev = trace.layer_output(n_layers - 2);
            for (j, &dj) in deltas.iter().enumerate() {
                if dj != 0.0 {
                    delta.biases[pair][j] += dj;
                    let row = delta.weights[pair]
                        .row_mut(j)
                        .into_slice()
                        .expect("delta rows are contiguous");
                    for (i, x) in view.incoming_inputs(pair, j, prev) {
                        row[i] += x * dj;
                    }
                }
            }
        }

        // Hidden layers, top down. Each neuron folds the deltas arriving on
        // its retained outgoing edges and emits gradients for its retained
        // incoming edges.
        for l in (1..n_layers - 1).rev() {
            let spec = self.layers[l];
            let pair_above = l;
            let pair_below = l - 1;
            let prev = trace.layer_output(l - 1);
            let mut next_deltas = vec![0.0; spec.units];

            if spec.normalize {
                // Deltas arrive against the normalized outputs; pull them
                // back through the divide-by-sum before the neuron step.
                let mut message_sums = vec![0.0; spec.units];
                for (i, sum) in message_sums.iter_mut().enumerate() {
                    *sum = view
                        .backward_messages(pair_above, i, &deltas)
                        .map(|m| m.delta * m.weight)
                        .sum();
                }
                let pulled =
                    interlayer_normalize_backward(&message_sums, &trace.emitted[l]);
                for (i, slot) in next_deltas.iter_mut().enumerate() {
                    let m = trace.masks[l][i];
                    let di = if m == 0.0 {
                        0.0
                    } else {
                        pulled[i]
                            * crate::numeric::activation_derivative(
                                spec.activation,
                                trace.emitted[l][i],
                            )
                    };
                    if di != 0.0 {
                        delta.biases[pair_below][i] += di;
                        let row = delta.weights[pair_below]
                            .row_mut(i)
                            .into_slice()
                            .expect("delta rows are contiguous");
                        for (idx, x) in view.incoming_inputs(pair_below, i, prev) {
                            row[idx] += x * di;
                        }
                    }
                    *slot = di;
                }
            } else {
                for (i, slot) in next_deltas.iter_mut().enumerate() {
                    let ctx = NeuronContext::restored(
                        (l, i),
                        spec.activation,
                        true,
                        trace.emitted[l][i],
                        trace.masks[l][i],
                    );
                    let messages = view.backward_messages(pair_above, i, &deltas);
                    let inputs = view.incoming_inputs(pair_below, i, prev);
                    let (di, gradients) = standard_backward(&ctx, messages, inputs)?;
                    if di != 0.0 {
                        delta.biases[pair_below][i] += di;
                        let row = delta.weights[pair_below]
                            .row_mut(i)
                            .into_slice()
                            .expect("delta rows are contiguous");
                        for (idx, g) in gradients {
                            row[idx] += g;
                        }
                    }
                    *slot = di;
                }
            }
            deltas = next_deltas;
        }

        delta.sample_count += 1;
        Ok(loss)
    }

    /// Class prediction: inference over the full parent model, argmax with
    /// ties broken toward the lowest index.
    pub fn predict(&self, input: &[f64]) -> Result<usize, ModelError> {
        let mask = SubModelMask::full(&self.layer_units());
        let rng = SplitRng::new(0);
        let (output, _) = self.feed_forward(&mask, input, Mode::Inference, &rng)?;
        Ok(argmax(&output))
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    fn tiny_model(seed: u64) -> NetworkModel {
        let mut m = NetworkModel::new(seed);
        m.add_layer(LayerSpec::standard(4, ActivationKind::Identity))
            .unwrap();
        m.add_layer(LayerSpec::standard(3, ActivationKind::Tanh))
            .unwrap();
        m.add_layer(LayerSpec::standard(2, ActivationKind::SoftmaxOutput))
            .unwrap();
        m
    }

    /// Dense reference: activation(W.x + b) per layer, softmax head.
    fn dense_oracle(model: &NetworkModel, input: &[f64]) -> Vec<f64> {
        let mut x = Array1::from_vec(input.to_vec());
        for (pair, spec) in model.layers().iter().skip(1).enumerate() {
            let z = model.store().weights[pair].dot(&x) + &model.store().biases[pair];
            x = z.mapv(|v| crate::numeric::apply_activation(spec.activation, v));
        }
        if model.layers().last().unwrap().activation == ActivationKind::SoftmaxOutput {
            softmax(x.as_slice().unwrap())
        } else {
            x.to_vec()
        }
    }

    #[test]
    fn add_layer_allocates_expected_shapes() {
        let mut m = NetworkModel::new(1);
        m.add_layer(LayerSpec::standard(784, ActivationKind::Identity))
            .unwrap();
        assert!(m.store().weights.is_empty());
        m.add_layer(LayerSpec::dropout(512, ActivationKind::ReLU, 0.5))
            .unwrap();
        assert_eq!(m.store().weights[0].dim(), (512, 784));
        assert_eq!(m.store().biases[0].len(), 512);
        assert_eq!(m.store().weight_velocity[0].dim(), (512, 784));
    }

    #[test]
    fn add_layer_rejects_zero_units() {
        let mut m = NetworkModel::new(1);
        assert!(m
            .add_layer(LayerSpec::standard(0, ActivationKind::Identity))
            .is_err());
    }

    #[test]
    fn init_weights_within_fan_in_bound() {
        let mut m = NetworkModel::new(7);
        m.add_layer(LayerSpec::standard(100, ActivationKind::Identity))
            .unwrap();
        m.add_layer(LayerSpec::standard(20, ActivationKind::ReLU))
            .unwrap();
        let bound = 1.0 / 10.0;
        for &w in m.store().weights[0].iter() {
            assert!(w.abs() <= bound);
        }
        assert!(m.store().biases[0].iter().all(|&b| b == 0.0));
        // seeded: same seed, same init
        let mut m2 = NetworkModel::new(7);
        m2.add_layer(LayerSpec::standard(100, ActivationKind::Identity))
            .unwrap();
        m2.add_layer(LayerSpec::standard(20, ActivationKind::ReLU))
            .unwrap();
        assert_eq!(m.store().weights[0], m2.store().weights[0]);
    }

    #[test]
    fn validate_rejects_dropout_output() {
        let mut m = NetworkModel::new(1);
        m.add_layer(LayerSpec::standard(2, ActivationKind::Identity))
            .unwrap();
        m.add_layer(LayerSpec::dropout(2, ActivationKind::SoftmaxOutput, 0.5))
            .unwrap();
        assert!(matches!(m.validate(), Err(ModelError::DropoutOutputLayer)));
    }

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let mut m = tiny_model(3);
        for w in &mut m.store_mut().weights {
            w.fill(0.0);
        }
        let mask = SubModelMask::full(&m.layer_units());
        let (out, _) = m
            .feed_forward(&mask, &[0.3, -0.2, 0.9, 0.1], Mode::Inference, &SplitRng::new(0))
            .unwrap();
        for p in out {
            assert!((p - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn full_mask_forward_matches_dense_oracle() {
        let mut rng = SplitRng::new(20);
        for trial in 0..100 {
            let n_layers = 2 + rng.next_index(3);
            let mut m = NetworkModel::new(1000 + trial);
            m.add_layer(LayerSpec::standard(
                1 + rng.next_index(64),
                ActivationKind::Identity,
            ))
            .unwrap();
            for _ in 0..n_layers - 2 {
                m.add_layer(LayerSpec::standard(
                    1 + rng.next_index(64),
                    ActivationKind::Tanh,
                ))
                .unwrap();
            }
            m.add_layer(LayerSpec::standard(
                1 + rng.next_index(64),
                ActivationKind::SoftmaxOutput,
            ))
            .unwrap();

            let input: Vec<f64> = (0..m.layer_units()[0])
                .map(|_| rng.next_in_range(-1.0, 1.0))
                .collect();
            let mask = SubModelMask::full(&m.layer_units());
            let (got, _) = m
                .feed_forward(&mask, &input, Mode::Inference, &SplitRng::new(0))
                .unwrap();
            let want = dense_oracle(&m, &input);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-10, "trial {trial}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn forward_is_deterministic_in_rng() {
        let mut m = NetworkModel::new(5);
        m.add_layer(LayerSpec::dropout(6, ActivationKind::Identity, 0.8))
            .unwrap();
        m.add_layer(LayerSpec::dropout(5, ActivationKind::ReLU, 0.5))
            .unwrap();
        m.add_layer(LayerSpec::standard(3, ActivationKind::SoftmaxOutput))
            .unwrap();
        let mask = SubModelMask::full(&m.layer_units());
        let input = vec![0.5; 6];
        let rng = SplitRng::new(123);
        let (a, ta) = m
            .feed_forward(&mask, &input, Mode::Training, &rng)
            .unwrap();
        let (b, tb) = m
            .feed_forward(&mask, &input, Mode::Training, &rng)
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(ta.masks, tb.masks);
        // a different stream draws different dropout masks somewhere
        let mut any_differs = false;
        for probe in 0..16 {
            let (_, tc) = m
                .feed_forward(&mask, &input, Mode::Training, &SplitRng::new(probe))
                .unwrap();
            if tc.masks != ta.masks {
                any_differs = true;
                break;
            }
        }
        assert!(any_differs);
    }

    #[test]
    fn isolated_hidden_neuron_emits_activation_of_bias() {
        let mut m = tiny_model(9);
        m.store_mut().biases[0][1] = 0.4;
        let units = m.layer_units();
        let mut mask = SubModelMask::full(&units);
        // cut every connection into hidden neuron 1
        for i in 0..units[0] {
            mask.retain[0][[1, i]] = false;
        }
        let input = vec![0.2, -0.4, 0.8, 0.5];
        let (_, trace) = m
            .feed_forward(&mask, &input, Mode::Inference, &SplitRng::new(0))
            .unwrap();
        let expected = crate::numeric::apply_activation(ActivationKind::Tanh, 0.4);
        assert!((trace.emitted[1][1] - expected).abs() < 1e-12);

        // other neurons agree with an oracle whose weight rows into neuron 1
        // are zeroed and whose bias drives it identically
        let mut reference = m.clone();
        for i in 0..units[0] {
            reference.store_mut().weights[0][[1, i]] = 0.0;
        }
        let full = SubModelMask::full(&units);
        let (_, ref_trace) = reference
            .feed_forward(&full, &input, Mode::Inference, &SplitRng::new(0))
            .unwrap();
        for j in 0..units[1] {
            assert!((trace.emitted[1][j] - ref_trace.emitted[1][j]).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_zero_when_output_equals_target() {
        // force an exact one-hot output by saturating one logit
        let mut m = tiny_model(11);
        let mask = SubModelMask::full(&m.layer_units());
        m.store_mut().weights[1].fill(0.0);
        m.store_mut().biases[1][0] = 60.0;
        m.store_mut().biases[1][1] = -60.0;
        let (out, trace) = m
            .feed_forward(&mask, &[0.0; 4], Mode::Training, &SplitRng::new(0))
            .unwrap();
        assert!(out[0] > 1.0 - 1e-12);
        let (loss, delta) = m.back_propagate(&mask, &trace, &[1.0, 0.0]).unwrap();
        assert!(loss < 1e-9, "loss {loss}");
        for d in delta.weights[1].iter() {
            assert!(d.abs() < 1e-12);
        }
    }

    #[test]
    fn fused_head_delta_matches_composed_derivatives() {
        // d(loss)/d(logit_j) through the explicit softmax jacobian equals
        // output - target.
        let mut rng = SplitRng::new(40);
        for _ in 0..50 {
            let logits: Vec<f64> = (0..6).map(|_| rng.next_in_range(-3.0, 3.0)).collect();
            let p = softmax(&logits);
            let hot = rng.next_index(6);
            let mut composed = [0.0; 6];
            for j in 0..6 {
                for i in 0..6 {
                    let ce_grad = if i == hot { -1.0 / p[i] } else { 0.0 };
                    let jac = p[i] * (if i == j { 1.0 } else { 0.0 } - p[j]);
                    composed[j] += ce_grad * jac;
                }
            }
            for j in 0..6 {
                let fused = p[j] - if j == hot { 1.0 } else { 0.0 };
                assert!((composed[j] - fused).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_on_4_3_2() {
        let mut m = NetworkModel::new(17);
        m.add_layer(LayerSpec::standard(4, ActivationKind::Identity))
            .unwrap();
        m.add_layer(LayerSpec::dropout(3, ActivationKind::Tanh, 0.5))
            .unwrap();
        m.add_layer(LayerSpec::standard(2, ActivationKind::SoftmaxOutput))
            .unwrap();
        let mask = SubModelMask::full(&m.layer_units());
        let input = [0.3, -0.7, 0.5, 0.9];
        let target = [0.0, 1.0];
        // fixed rng fixes the dropout masks across every evaluation
        let rng = SplitRng::new(2024);

        let (_, trace) = m
            .feed_forward(&mask, &input, Mode::Training, &rng)
            .unwrap();
        assert!(
            trace.masks[1].iter().any(|&v| v != 0.0),
            "seed drops every hidden neuron; pick another"
        );
        let (_, analytic) = m.back_propagate(&mask, &trace, &target).unwrap();

        let h = 1e-6;
        let loss_at = |m: &NetworkModel| -> f64 {
            let (_, t) = m.feed_forward(&mask, &input, Mode::Training, &rng).unwrap();
            cross_entropy(&t.output, &target).unwrap()
        };
        for pair in 0..2 {
            let (rows, cols) = m.store().weights[pair].dim();
            for r in 0..rows {
                for c in 0..cols {
                    let mut plus = m.clone();
                    plus.store_mut().weights[pair][[r, c]] += h;
                    let mut minus = m.clone();
                    minus.store_mut().weights[pair][[r, c]] -= h;
                    let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                    let an = analytic.weights[pair][[r, c]];
                    let denom = fd.abs().max(an.abs()).max(1e-4);
                    assert!(
                        ((fd - an) / denom).abs() < 1e-4,
                        "w[{pair}][{r},{c}]: fd {fd} vs analytic {an}"
                    );
                }
            }
        }
    }

    #[test]
    fn masked_connection_gradient_is_exactly_zero() {
        let m = tiny_model(23);
        let units = m.layer_units();
        let mut mask = SubModelMask::full(&units);
        mask.retain[0][[2, 1]] = false;
        let rng = SplitRng::new(5);
        let (_, trace) = m
            .feed_forward(&mask, &[0.5, 0.5, 0.5, 0.5], Mode::Training, &rng)
            .unwrap();
        let (_, delta) = m.back_propagate(&mask, &trace, &[1.0, 0.0]).unwrap();
        assert_eq!(delta.weights[0][[2, 1]], 0.0);
        // a retained sibling connection does learn
        assert!(delta.weights[0][[2, 0]] != 0.0);
    }

    #[test]
    fn backward_rejects_inference_trace() {
        let m = tiny_model(2);
        let mask = SubModelMask::full(&m.layer_units());
        let (_, trace) = m
            .feed_forward(&mask, &[0.0; 4], Mode::Inference, &SplitRng::new(0))
            .unwrap();
        assert!(matches!(
            m.back_propagate(&mask, &trace, &[1.0, 0.0]),
            Err(ModelError::TraceModeMismatch)
        ));
    }

    #[test]
    fn predict_ties_break_low_and_follow_argmax() {
        assert_eq!(argmax(&[0.1, 0.7, 0.2]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);

        let mut m = tiny_model(29);
        for w in &mut m.store_mut().weights {
            w.fill(0.0);
        }
        for b in &mut m.store_mut().biases {
            b.fill(0.0);
        }
        // uniform softmax everywhere: tie broken to class 0
        assert_eq!(m.predict(&[0.4, 0.1, -0.3, 0.2]).unwrap(), 0);
    }

    #[test]
    fn predict_agrees_with_oracle_argmax() {
        let mut rng = SplitRng::new(61);
        for trial in 0..100 {
            let mut m = NetworkModel::new(5000 + trial);
            m.add_layer(LayerSpec::standard(
                1 + rng.next_index(16),
                ActivationKind::Identity,
            ))
            .unwrap();
            m.add_layer(LayerSpec::standard(
                1 + rng.next_index(16),
                ActivationKind::ReLU,
            ))
            .unwrap();
            m.add_layer(LayerSpec::standard(
                2 + rng.next_index(8),
                ActivationKind::SoftmaxOutput,
            ))
            .unwrap();
            let input: Vec<f64> = (0..m.layer_units()[0])
                .map(|_| rng.next_in_range(-1.0, 1.0))
                .collect();
            let want = argmax(&dense_oracle(&m, &input));
            assert_eq!(m.predict(&input).unwrap(), want);
        }
    }

    #[test]
    fn normalized_hidden_layer_gradients_match_finite_differences() {
        let mut m = NetworkModel::new(83);
        m.add_layer(LayerSpec::standard(3, ActivationKind::Identity))
            .unwrap();
        m.add_layer(LayerSpec::standard(4, ActivationKind::Sigmoid).with_normalize())
            .unwrap();
        m.add_layer(LayerSpec::standard(2, ActivationKind::SoftmaxOutput))
            .unwrap();
        let mask = SubModelMask::full(&m.layer_units());
        let input = [0.8, -0.2, 0.4];
        let target = [1.0, 0.0];
        let rng = SplitRng::new(0);

        let (_, trace) = m
            .feed_forward(&mask, &input, Mode::Training, &rng)
            .unwrap();
        let (_, analytic) = m.back_propagate(&mask, &trace, &target).unwrap();

        let h = 1e-6;
        let loss_at = |m: &NetworkModel| -> f64 {
            let (_, t) = m.feed_forward(&mask, &input, Mode::Training, &rng).unwrap();
            cross_entropy(&t.output, &target).unwrap()
        };
        for pair in 0..2 {
            let (rows, cols) = m.store().weights[pair].dim();
            for r in 0..rows {
                for c in 0..cols {
                    let mut plus = m.clone();
                    plus.store_mut().weights[pair][[r, c]] += h;
                    let mut minus = m.clone();
                    minus.store_mut().weights[pair][[r, c]] -= h;
                    let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                    let an = analytic.weights[pair][[r, c]];
                    let denom = fd.abs().max(an.abs()).max(1e-4);
                    assert!(
                        ((fd - an) / denom).abs() < 1e-4,
                        "w[{pair}][{r},{c}]: fd {fd} vs analytic {an}"
                    );
                }
            }
        }
    }
}
