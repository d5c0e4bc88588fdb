//! The neuron-centric programming surface.
//!
//! Computation is defined per neuron over the messages it receives: a
//! forward pass folds [`ForwardMessage`]s into a weighted sum and emits
//! an activation, a backward pass folds [`BackwardMessage`]s into an
//! error term and yields per-connection weight gradients. Dropout is a
//! neuron variant that masks its own emission during training.

use crate::numeric::{
    activation_derivative, apply_activation, binomial_draw, ActivationKind, SplitRng,
};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NeuronError {
    #[error("non-finite weighted sum at neuron ({0}, {1})")]
    NonFiniteSum(usize, usize),
    #[error("backward called before any forward at neuron ({0}, {1})")]
    BackwardBeforeForward(usize, usize),
    #[error(transparent)]
    Numeric(#[from] crate::numeric::NumericError),
}

/// One incoming connection's payload during the forward phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardMessage {
    /// Index of the sending neuron in the previous layer.
    pub source_index: usize,
    /// The sender's emitted activation.
    pub input: f64,
    /// Weight of the connection, as resolved through the sub-model mask.
    pub weight: f64,
}

/// One outgoing connection's payload during the backward phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackwardMessage {
    /// Index of the sending neuron in the next layer.
    pub source_index: usize,
    /// The sender's error term.
    pub delta: f64,
    /// Weight of the connection from this neuron to the sender.
    pub weight: f64,
}

/// Whether a neuron computes plainly or applies dropout to its emission.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NeuronKind {
    Standard,
    Dropout { retention: f64 },
}

impl NeuronKind {
    pub fn dropout(retention: f64) -> Result<Self, String> {
        if retention > 0.0 && retention <= 1.0 {
            Ok(NeuronKind::Dropout { retention })
        } else {
            Err(format!("dropout retention {retention} outside (0, 1]"))
        }
    }
}

/// Per-neuron state carried between the forward and backward phases.
#[derive(Debug, Clone)]
pub struct NeuronContext {
    /// (layer index, index within layer)
    pub neuron_id: (usize, usize),
    pub activation: ActivationKind,
    pub is_training: bool,
    /// Activation emitted by the most recent forward call.
    pub cached_output: f64,
    /// Dropout mask: 0 or 1 during training, the retention probability at
    /// inference, and always 1 for standard neurons.
    pub cached_mask: f64,
    forwarded: bool,
}

impl NeuronContext {
    pub fn new(neuron_id: (usize, usize), activation: ActivationKind, is_training: bool) -> Self {
        NeuronContext {
            neuron_id,
            activation,
            is_training,
            cached_output: 0.0,
            cached_mask: 1.0,
            forwarded: false,
        }
    }

    /// Rebuilds the context a forward pass left behind, e.g. from a stored
    /// trace when running the backward phase.
    pub fn restored(
        neuron_id: (usize, usize),
        activation: ActivationKind,
        is_training: bool,
        cached_output: f64,
        cached_mask: f64,
    ) -> Self {
        NeuronContext {
            neuron_id,
            activation,
            is_training,
            cached_output,
            cached_mask,
            forwarded: true,
        }
    }

    #[inline]
    fn record(&mut self, output: f64, mask: f64) {
        self.cached_output = output;
        self.cached_mask = mask;
        self.forwarded = true;
    }
}

#[inline]
fn weighted_sum(
    ctx: &NeuronContext,
    messages: impl IntoIterator<Item = ForwardMessage>,
    bias: f64,
) -> Result<f64, NeuronError> {
    let mut sum = bias;
    for m in messages {
        sum += m.input * m.weight;
    }
    if sum.is_finite() {
        Ok(sum)
    } else {
        Err(NeuronError::NonFiniteSum(ctx.neuron_id.0, ctx.neuron_id.1))
    }
}

/// Forward step of a standard neuron: fold incoming messages into a
/// weighted sum, add the bias, apply the activation, emit.
#[inline]
pub fn standard_forward(
    ctx: &mut NeuronContext,
    messages: impl IntoIterator<Item = ForwardMessage>,
    bias: f64,
) -> Result<f64, NeuronError> {
    let sum = weighted_sum(ctx, messages, bias)?;
    let out = apply_activation(ctx.activation, sum);
    ctx.record(out, 1.0);
    Ok(out)
}

/// Forward step of a dropout neuron.
///
/// Training draws a fresh binary mask; a dropped neuron emits 0 without
/// computing its weighted sum. Inference scales the activation by the
/// retention probability instead of drawing.
#[inline]
pub fn dropout_forward(
    ctx: &mut NeuronContext,
    messages: impl IntoIterator<Item = ForwardMessage>,
    bias: f64,
    retention: f64,
    rng: &mut SplitRng,
) -> Result<f64, NeuronError> {
    if ctx.is_training {
        let mask = binomial_draw(rng, retention)?;
        if mask == 0 {
            ctx.record(0.0, 0.0);
            return Ok(0.0);
        }
        let sum = weighted_sum(ctx, messages, bias)?;
        let out = apply_activation(ctx.activation, sum) * f64::from(mask);
        ctx.record(out, f64::from(mask));
        Ok(out)
    } else {
        let sum = weighted_sum(ctx, messages, bias)?;
        let out = apply_activation(ctx.activation, sum) * retention;
        ctx.record(out, retention);
        Ok(out)
    }
}

/// Lazy per-connection weight gradients produced by [`standard_backward`]:
/// each stored input `(index, x)` yields `(index, x * delta)`.
#[derive(Debug)]
pub struct WeightGradients<I> {
    delta: f64,
    inputs: I,
}

impl<I: Iterator<Item = (usize, f64)>> Iterator for WeightGradients<I> {
    type Item = (usize, f64);

    #[inline]
    fn next(&mut self) -> Option<(usize, f64)> {
        self.inputs.next().map(|(i, x)| (i, x * self.delta))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.inputs.size_hint()
    }
}

/// Backward step: fold incoming error messages into this neuron's
/// propagated delta and yield the gradient for each incoming connection.
///
/// `inputs` are the stored `(source index, activation)` pairs this neuron
/// consumed in the forward pass. Gradients are signed so that descent
/// subtracts `learning_rate * gradient`. A dropped-out neuron (mask 0)
/// propagates zero and all its gradients are zero.
#[inline]
pub fn standard_backward<M, I>(
    ctx: &NeuronContext,
    messages: M,
    inputs: I,
) -> Result<(f64, WeightGradients<I::IntoIter>), NeuronError>
where
    M: IntoIterator<Item = BackwardMessage>,
    I: IntoIterator<Item = (usize, f64)>,
{
    if !ctx.forwarded {
        return Err(NeuronError::BackwardBeforeForward(
            ctx.neuron_id.0,
            ctx.neuron_id.1,
        ));
    }
    let delta = if ctx.cached_mask == 0.0 {
        0.0
    } else {
        let mut gradient = 0.0;
        for m in messages {
            gradient += m.delta * m.weight;
        }
        gradient * activation_derivative(ctx.activation, ctx.cached_output)
    };
    Ok((
        delta,
        WeightGradients {
            delta,
            inputs: inputs.into_iter(),
        },
    ))
}

/// Guard below which a layer sum is treated as degenerate and
/// normalization becomes the identity.
pub const NORMALIZE_SUM_GUARD: f64 = 1e-12;

/// Divides each layer output by the layer sum. A near-zero sum returns the
/// input unchanged.
pub fn interlayer_normalize(outputs: &[f64]) -> Vec<f64> {
    assert!(!outputs.is_empty(), "normalizing an empty layer");
    let sum: f64 = outputs.iter().sum();
    if sum.abs() < NORMALIZE_SUM_GUARD {
        return outputs.to_vec();
    }
    outputs.iter().map(|y| y / sum).collect()
}

/// Pulls deltas taken against normalized outputs back to the raw outputs.
///
/// For `n_i = y_i / S` with `S = sum(y)` the adjoint is
/// `dL/dy_j = (dL/dn_j) / S - (sum_i dL/dn_i * y_i) / S^2`. When the
/// degenerate-sum guard made the forward an identity, this is too.
pub fn interlayer_normalize_backward(deltas: &[f64], raw_outputs: &[f64]) -> Vec<f64> {
    let sum: f64 = raw_outputs.iter().sum();
    if sum.abs() < NORMALIZE_SUM_GUARD {
        return deltas.to_vec();
    }
    let weighted: f64 = deltas
        .iter()
        .zip(raw_outputs)
        .map(|(d, y)| d * y)
        .sum();
    deltas
        .iter()
        .map(|d| d / sum - weighted / (sum * sum))
        .collect()
}
