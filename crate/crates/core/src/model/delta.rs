//! Accumulated weight and bias gradients, shaped like the parent model.

use ndarray::{Array1, Array2};

/// Gradient accumulator pushed to the parameter server. Shapes mirror the
/// model's weight store; `sample_count` records how many examples
/// contributed.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterDelta {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub sample_count: usize,
}

impl ParameterDelta {
    /// Zero gradients for a model with the given per-layer unit counts.
    pub fn zeros(layer_units: &[usize]) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_units.windows(2) {
            weights.push(Array2::zeros((pair[1], pair[0])));
            biases.push(Array1::zeros(pair[1]));
        }
        ParameterDelta {
            weights,
            biases,
            sample_count: 0,
        }
    }

    /// Per-layer unit counts implied by the stored shapes.
    pub fn layer_units(&self) -> Vec<usize> {
        let mut units = Vec::with_capacity(self.weights.len() + 1);
        if let Some(first) = self.weights.first() {
            units.push(first.ncols());
        }
        for w in &self.weights {
            units.push(w.nrows());
        }
        units
    }

    pub fn same_shape(&self, other: &ParameterDelta) -> bool {
        self.weights.len() == other.weights.len()
            && self
                .weights
                .iter()
                .zip(&other.weights)
                .all(|(a, b)| a.dim() == b.dim())
    }

    /// Elementwise accumulate; sample counts add.
    pub fn add_assign(&mut self, other: &ParameterDelta) {
        assert!(self.same_shape(other), "delta shape mismatch");
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
        self.sample_count += other.sample_count;
    }

    /// Scales every gradient entry, leaving `sample_count` alone.
    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            *w *= factor;
        }
        for b in &mut self.biases {
            *b *= factor;
        }
    }

    pub fn reset(&mut self) {
        for w in &mut self.weights {
            w.fill(0.0);
        }
        for b in &mut self.biases {
            b.fill(0.0);
        }
        self.sample_count = 0;
    }

    /// Largest absolute gradient entry, handy for diagnostics.
    pub fn max_abs(&self) -> f64 {
        let w = self
            .weights
            .iter()
            .flat_map(|m| m.iter())
            .fold(0.0f64, |acc, &v| acc.max(v.abs()));
        self.biases
            .iter()
            .flat_map(|b| b.iter())
            .fold(w, |acc, &v| acc.max(v.abs()))
    }
}
