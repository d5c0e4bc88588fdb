//! Neuron-centric neural network training on a simulated cluster.
//!
//! The computation model is defined per neuron: each neuron folds the
//! messages arriving on its retained connections, applies its activation,
//! and emits. On top of that sit layered model construction, irregular
//! sub-model partitioning (DropConnect-style edge masks shared with the
//! parent's weights), dropout neurons, and an in-process cluster of
//! worker tasks synchronized through a parameter server in AllReduce or
//! Downpour mode.

pub mod cluster;
pub mod data;
pub mod io;
pub mod model;
pub mod neuron;
pub mod numeric;
pub mod partition;
pub mod trainer;

/// Tags for deriving the independent random streams of a run from its
/// seed, so no two subsystems ever share a sequence.
pub(crate) mod streams {
    pub const WEIGHT_INIT: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const MASKS: u64 = 3;
    pub const WORKER: u64 = 4;
}
