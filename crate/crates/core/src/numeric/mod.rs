//! Scalar numeric kernels: activations, their derivatives, softmax,
//! cross-entropy loss, and deterministic random sampling.
//!
//! Everything here is 64-bit floating point and free of hidden state;
//! the only stateful piece is [`SplitRng`], which each worker owns
//! privately.

pub mod rng;

pub use rng::{binomial_draw, SplitRng};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NumericError {
    #[error("probability {0} outside [0, 1]")]
    ProbabilityOutOfRange(f64),
    #[error("length mismatch: prediction has {pred} entries, target has {target}")]
    LengthMismatch { pred: usize, target: usize },
}

/// Activation functions a neuron can apply to its weighted input sum.
///
/// `SoftmaxOutput` marks an output layer whose probabilities are produced
/// by a layer-level softmax; at the neuron level it is the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationKind {
    ReLU,
    Tanh,
    Sigmoid,
    Identity,
    SoftmaxOutput,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 5] = [
        ActivationKind::ReLU,
        ActivationKind::Tanh,
        ActivationKind::Sigmoid,
        ActivationKind::Identity,
        ActivationKind::SoftmaxOutput,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::ReLU => "relu",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::Identity => "identity",
            ActivationKind::SoftmaxOutput => "softmax_output",
        }
    }
}

/// Applies the activation function to a pre-activation value.
#[inline]
pub fn apply_activation(kind: ActivationKind, x: f64) -> f64 {
    match kind {
        ActivationKind::ReLU => x.max(0.0),
        ActivationKind::Tanh => x.tanh(),
        ActivationKind::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        ActivationKind::Identity | ActivationKind::SoftmaxOutput => x,
    }
}

/// Derivative of the activation, expressed in terms of the activation
/// *output* (the usual form for Tanh and Sigmoid).
///
/// The ReLU derivative at exactly zero output is defined as 0.
#[inline]
pub fn activation_derivative(kind: ActivationKind, output: f64) -> f64 {
    match kind {
        ActivationKind::ReLU => {
            if output > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        ActivationKind::Tanh => 1.0 - output * output,
        ActivationKind::Sigmoid => output * (1.0 - output),
        ActivationKind::Identity | ActivationKind::SoftmaxOutput => 1.0,
    }
}

/// Numerically stable softmax: shifts by the maximum before exponentiating.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    assert!(!v.is_empty(), "softmax of an empty vector");
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Floor applied to predicted probabilities before taking the log.
pub const CROSS_ENTROPY_CLAMP: f64 = 1e-12;

/// Cross-entropy of a predicted distribution against a one-hot target:
/// `-ln(pred[t])` with the prediction clamped below by
/// [`CROSS_ENTROPY_CLAMP`].
pub fn cross_entropy(pred: &[f64], target: &[f64]) -> Result<f64, NumericError> {
    if pred.len() != target.len() {
        return Err(NumericError::LengthMismatch {
            pred: pred.len(),
            target: target.len(),
        });
    }
    let mut loss = 0.0;
    for (&p, &t) in pred.iter().zip(target) {
        if t != 0.0 {
            loss -= t * p.max(CROSS_ENTROPY_CLAMP).ln();
        }
    }
    Ok(loss)
}
