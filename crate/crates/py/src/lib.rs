//! Python bindings: a thin layer over the core crate exposing the
//! accountant, training configuration, datasets, training/generation, the
//! downstream evaluation, and grid rendering.
//!
//! Build the importable module with
//! `cargo build -p dpcgan-py --release --features extension-module`, then
//! rename `libdpcgan_py.so` to `dpcgan_py.so` somewhere on `sys.path`
//! (`python/smoke_test.py` automates this against a debug build).

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use dpcgan::accountant::max_affordable_steps;
use dpcgan::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use dpcgan::data::{load_idx, render_grid, save_idx};
use dpcgan::eval::{auroc_ovr, train_classifier, ClassifierSpec};
use dpcgan::train::{balanced_one_hot, generate};
use dpcgan::{
    AccountantState, LabeledDataset, MechanismParams, RngStream, StreamStates, TrainConfig,
};

/// Maps core errors onto Python exceptions: I/O problems raise `IOError`,
/// everything else raises `ValueError` with the same message.
fn to_py(err: dpcgan::Error) -> PyErr {
    match err.exit_code() {
        3 => PyIOError::new_err(err.to_string()),
        _ => PyValueError::new_err(err.to_string()),
    }
}

/// Rényi-DP accountant for the subsampled Gaussian mechanism.
#[pyclass]
struct Accountant {
    state: AccountantState,
}

#[pymethods]
impl Accountant {
    #[new]
    fn new(q: f64, sigma: f64) -> PyResult<Self> {
        let params = MechanismParams::new(q, sigma).map_err(to_py)?;
        Ok(Accountant {
            state: AccountantState::new(params).map_err(to_py)?,
        })
    }

    /// Records `n` more mechanism invocations.
    fn accumulate(&mut self, n: u64) -> PyResult<()> {
        self.state = self.state.accumulate_step(n).map_err(to_py)?;
        Ok(())
    }

    /// Steps recorded so far.
    fn steps(&self) -> u64 {
        self.state.steps()
    }

    /// Per-step Rényi divergence at integer order `alpha`.
    fn rdp(&self, alpha: u32) -> PyResult<f64> {
        dpcgan::accountant::rdp_subsampled_gaussian(self.state.params(), alpha).map_err(to_py)
    }

    /// Converts the accumulated spend to `(epsilon, optimal_order)` at `delta`.
    fn epsilon(&self, delta: f64) -> PyResult<(f64, u32)> {
        let spend = self.state.to_epsilon_delta(delta).map_err(to_py)?;
        Ok((spend.epsilon, spend.optimal_order))
    }

    /// Largest step count whose spend stays within `target_epsilon`.
    fn max_affordable_steps(&self, target_epsilon: f64, target_delta: f64) -> PyResult<u64> {
        max_affordable_steps(self.state.params(), target_epsilon, target_delta).map_err(to_py)
    }
}

/// Training configuration mirroring the `key = value` config format.
#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct Config {
    inner: TrainConfig,
}

#[pymethods]
impl Config {
    #[new]
    fn new() -> Self {
        Config {
            inner: TrainConfig::default(),
        }
    }

    /// Sets one field by its config-file key (e.g. `set("batch_size", "64")`).
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(to_py)
    }

    /// Serializes in config-file form.
    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    /// Parses a full config-file text.
    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Config> {
        Ok(Config {
            inner: TrainConfig::from_text(text).map_err(to_py)?,
        })
    }
}

/// A labeled image dataset (rows of flattened pixels in [0,1], one-hot labels).
#[pyclass]
struct Dataset {
    inner: LabeledDataset,
}

#[pymethods]
impl Dataset {
    /// Loads an IDX image/label pair.
    #[staticmethod]
    fn load(images_path: PathBuf, labels_path: PathBuf) -> PyResult<Dataset> {
        Ok(Dataset {
            inner: load_idx(&images_path, &labels_path).map_err(to_py)?,
        })
    }

    /// Writes the dataset back out as an IDX image/label pair.
    fn save(&self, images_path: PathBuf, labels_path: PathBuf) -> PyResult<()> {
        save_idx(&self.inner, &images_path, &labels_path).map_err(to_py)
    }

    /// First `n` examples.
    fn take(&self, n: usize) -> PyResult<Dataset> {
        Ok(Dataset {
            inner: self.inner.take(n).map_err(to_py)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn feature_dim(&self) -> usize {
        self.inner.feature_dim()
    }

    /// Class index of example `i`.
    fn class_of(&self, i: usize) -> PyResult<usize> {
        if i >= self.inner.len() {
            return Err(PyValueError::new_err(format!(
                "index {i} out of range for {} examples",
                self.inner.len()
            )));
        }
        Ok(self.inner.class_of(i))
    }

    /// Pixel row of example `i`.
    fn image(&self, i: usize) -> PyResult<Vec<f64>> {
        if i >= self.inner.len() {
            return Err(PyValueError::new_err(format!(
                "index {i} out of range for {} examples",
                self.inner.len()
            )));
        }
        Ok(self.inner.images().row(i).to_vec())
    }

    /// Renders a rows×cols PGM tile grid (one class per row when possible).
    fn render_grid(&self, rows: usize, cols: usize, path: PathBuf) -> PyResult<()> {
        render_grid(&self.inner, rows, cols, &path).map_err(to_py)
    }
}

/// A trained model: the generator plus its training report and accountant.
#[pyclass]
struct TrainedModel {
    checkpoint: Checkpoint,
    steps_run: u64,
    halt_reason: String,
    final_epsilon: f64,
    final_delta: f64,
}

#[pymethods]
impl TrainedModel {
    fn steps_run(&self) -> u64 {
        self.steps_run
    }

    fn halt_reason(&self) -> &str {
        &self.halt_reason
    }

    /// Final privacy spend as `(epsilon, delta)`.
    fn final_spend(&self) -> (f64, f64) {
        (self.final_epsilon, self.final_delta)
    }

    /// Samples `per_class` synthetic examples for each class.
    fn generate(&self, per_class: usize, seed: u64) -> PyResult<Dataset> {
        let classes = self
            .checkpoint
            .generator
            .input_dim()
            .saturating_sub(self.checkpoint.config.latent_dim);
        let labels = balanced_one_hot(per_class, classes).map_err(to_py)?;
        let mut stream = RngStream::new(seed);
        Ok(Dataset {
            inner: generate(&self.checkpoint.generator, &labels, &mut stream).map_err(to_py)?,
        })
    }

    /// Writes the checkpoint file.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.checkpoint, &path).map_err(to_py)
    }

    /// Reads a checkpoint file back into a model.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<TrainedModel> {
        let checkpoint = load_checkpoint(&path).map_err(to_py)?;
        let spend = checkpoint
            .accountant
            .to_epsilon_delta(checkpoint.config.target_delta)
            .map_err(to_py)?;
        Ok(TrainedModel {
            steps_run: checkpoint.step,
            halt_reason: String::new(),
            final_epsilon: spend.epsilon,
            final_delta: checkpoint.config.target_delta,
            checkpoint,
        })
    }
}

/// Trains a DP-CGAN on `dataset` under `config`.
#[pyfunction]
fn train(dataset: &Dataset, config: &Config) -> PyResult<TrainedModel> {
    let (pair, report, accountant) = dpcgan::train::train(&dataset.inner, &config.inner)
        .map_err(to_py)?;
    Ok(TrainedModel {
        checkpoint: Checkpoint {
            config: config.inner.clone(),
            step: pair.step,
            generator: pair.generator,
            discriminator: pair.discriminator,
            adam: pair.adam_state,
            accountant,
            streams: StreamStates {
                params: report.final_streams.params,
                noise: report.final_streams.noise,
                sampling: report.final_streams.sampling,
            },
        },
        steps_run: report.steps_run,
        halt_reason: report.halt_reason.as_str().to_string(),
        final_epsilon: report.final_spend.epsilon,
        final_delta: config.inner.target_delta,
    })
}

/// Trains a downstream classifier (`"lr"` or `"mlp"`) on `source` and scores
/// it on `test`, returning `(macro_auroc, per_class_aurocs)` where absent
/// classes yield `None`.
#[pyfunction]
fn evaluate(
    source: &Dataset,
    test: &Dataset,
    classifier: &str,
    seed: u64,
) -> PyResult<(f64, Vec<Option<f64>>)> {
    let spec = match classifier {
        "lr" => ClassifierSpec::logistic_regression(),
        "mlp" => ClassifierSpec::mlp(),
        other => {
            return Err(PyValueError::new_err(format!(
                "classifier must be `lr` or `mlp`, got `{other}`"
            )))
        }
    };
    let model = train_classifier(&source.inner, &spec, seed).map_err(to_py)?;
    let roc = auroc_ovr(&model, &test.inner).map_err(to_py)?;
    Ok((roc.macro_auroc, roc.per_class))
}

#[pymodule]
fn dpcgan_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Accountant>()?;
    m.add_class::<Config>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<TrainedModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
