//! The experiment entry point: load data, build the model, train under
//! the configured cluster, write metrics, round log, and checkpoint.

use super::config::{ConfigError, ExperimentConfig};
use super::idx::{self, IdxError};
use crate::data::Dataset;
use crate::model::checkpoint::{self, CheckpointError};
use crate::trainer::{self, write_round_log, TrainError};
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Idx(#[from] IdxError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// What a finished experiment reports.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub final_accuracy: f64,
    pub iterations: u64,
    pub wall_s: f64,
}

impl Summary {
    pub fn line(&self) -> String {
        format!(
            "final_accuracy={} iterations={} wall_s={:.3}",
            self.final_accuracy, self.iterations, self.wall_s
        )
    }
}

fn load_set(
    images: &Path,
    labels: &Path,
    subset: Option<usize>,
) -> Result<Dataset, ExperimentError> {
    let set = idx::load_mnist(images, labels)?;
    Ok(match subset {
        Some(n) if n < set.len() => set.truncated(n),
        _ => set,
    })
}

/// Runs the configured experiment and writes `metrics.csv`, `rounds.csv`
/// and `checkpoint.bin` under the output directory. Returns the summary
/// it also prints.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Summary, ExperimentError> {
    let train_set = load_set(&config.train_images, &config.train_labels, config.train_subset)?;
    let test_set = load_set(&config.test_images, &config.test_labels, config.test_subset)?;

    let model = config.build_model(train_set.feature_dim(), train_set.n_classes())?;
    let hp = config.hyperparams();
    let cluster = config.cluster();
    let options = config.options()?;

    let started = Instant::now();
    let outcome = trainer::train(&cluster, &hp, &options, &train_set, &test_set, model)?;
    let wall_s = started.elapsed().as_secs_f64();

    fs::create_dir_all(&config.output_dir)?;
    let metrics_path = config.output_dir.join("metrics.csv");
    outcome
        .metrics
        .to_csv(BufWriter::new(File::create(&metrics_path)?))?;
    let rounds_path = config.output_dir.join("rounds.csv");
    write_round_log(
        &outcome.round_log,
        BufWriter::new(File::create(&rounds_path)?),
    )?;
    let checkpoint_path = config.output_dir.join("checkpoint.bin");
    let masks = if config.connection_drop_probability > 0.0 {
        outcome.masks.clone()
    } else {
        Vec::new()
    };
    checkpoint::save_to_path(&checkpoint_path, &outcome.model, &masks)?;

    let last = outcome
        .metrics
        .points
        .last()
        .expect("metrics always contain the initial point");
    let summary = Summary {
        final_accuracy: last.accuracy,
        iterations: last.iteration,
        wall_s,
    };
    println!("{}", summary.line());
    Ok(summary)
}

/// Loads a checkpointed model and reports its accuracy on a test pair.
pub fn evaluate_checkpoint(
    checkpoint_path: &Path,
    test_images: &Path,
    test_labels: &Path,
) -> Result<f64, ExperimentError> {
    let (model, _masks) = checkpoint::load_from_path(checkpoint_path)?;
    let test_set = idx::load_mnist(test_images, test_labels)?;
    Ok(trainer::evaluate(&model, &test_set, 8)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::idx::{write_idx_images, write_idx_labels};
    use crate::numeric::SplitRng;
    use ndarray::Array2;

    /// Builds a small synthetic IDX pair. Each class gets a blocky
    /// signature pattern so even a tiny model can separate them.
    pub fn write_synthetic_idx(dir: &Path, n: usize, seed: u64) {
        let mut rng = SplitRng::new(seed);
        let side = 6;
        let mut images = Array2::zeros((n, side * side));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = (i % 3) as u8;
            for p in 0..side * side {
                let hot = p % 3 == usize::from(class);
                let base = if hot { 0.75 } else { 0.1 };
                let noise = rng.next_in_range(-0.05, 0.05);
                images[[i, p]] = ((base + noise) * 255.0_f64).round().clamp(0.0, 255.0) / 255.0;
            }
            labels.push(class);
        }
        fs::write(
            dir.join("images-idx3-ubyte"),
            write_idx_images(&images, side, side),
        )
        .unwrap();
        fs::write(dir.join("labels-idx1-ubyte"), write_idx_labels(&labels)).unwrap();
    }

    fn synthetic_config(dir: &Path, max_iterations: u64) -> ExperimentConfig {
        write_synthetic_idx(dir, 60, 5);
        let text = format!(
            r#"
schema_version = 1
seed = 11
deterministic = true
train_images = "images-idx3-ubyte"
train_labels = "labels-idx1-ubyte"
test_images = "images-idx3-ubyte"
test_labels = "labels-idx1-ubyte"
hidden_layers = [10]
input_retention = 1.0
hidden_retention = 1.0
learning_rate = 0.2
momentum = 0.5
batch_size = 10
max_iterations = {max_iterations}
eval_interval = 5
output_dir = "out"
"#
        );
        ExperimentConfig::from_toml(&text, dir).unwrap()
    }

    #[test]
    fn zero_iteration_run_writes_single_row_csv() {
        let dir = tempfile::tempdir().unwrap();
        let config = synthetic_config(dir.path(), 0);
        let summary = run_experiment(&config).unwrap();
        assert_eq!(summary.iterations, 0);
        let csv = fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2, "header plus exactly one row: {csv}");
        assert!(lines[1].starts_with("0,NaN,"));
    }

    #[test]
    fn experiment_writes_all_artifacts_and_improves() {
        let dir = tempfile::tempdir().unwrap();
        let config = synthetic_config(dir.path(), 40);
        let summary = run_experiment(&config).unwrap();
        assert_eq!(summary.iterations, 40);
        assert!(summary.final_accuracy > 0.9, "{summary:?}");
        for artifact in ["metrics.csv", "rounds.csv", "checkpoint.bin"] {
            assert!(dir.path().join("out").join(artifact).exists());
        }
        // the saved checkpoint evaluates to the reported accuracy
        let acc = evaluate_checkpoint(
            &dir.path().join("out/checkpoint.bin"),
            &dir.path().join("images-idx3-ubyte"),
            &dir.path().join("labels-idx1-ubyte"),
        )
        .unwrap();
        assert_eq!(acc, summary.final_accuracy);
    }

    #[test]
    fn deterministic_reruns_write_identical_metrics_bytes() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        // same seed for the data fixture and the run
        let a = synthetic_config(dir_a.path(), 25);
        let b = synthetic_config(dir_b.path(), 25);
        run_experiment(&a).unwrap();
        run_experiment(&b).unwrap();
        let bytes_a = fs::read(dir_a.path().join("out/metrics.csv")).unwrap();
        let bytes_b = fs::read(dir_b.path().join("out/metrics.csv")).unwrap();
        assert_eq!(bytes_a, bytes_b);
        let rounds_a = fs::read(dir_a.path().join("out/rounds.csv")).unwrap();
        let rounds_b = fs::read(dir_b.path().join("out/rounds.csv")).unwrap();
        assert_eq!(rounds_a, rounds_b);
    }
}
