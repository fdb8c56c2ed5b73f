//! Python bindings: configs, super-networks, architectures, samplers and the
//! experiment commands. Structured results come back as plain dicts.

use std::path::PathBuf;

use postnas_core::config::ExperimentConfig;
use postnas_core::data::Split;
use postnas_core::experiment;
use postnas_core::{sampler, Architecture, Error, SearchSpaceSpec, Tensor};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyAny;

create_exception!(postnas, PostnasError, PyException);
create_exception!(postnas, ConfigError, PostnasError);
create_exception!(postnas, DataError, PostnasError);
create_exception!(postnas, NumericError, PostnasError);

fn to_py(err: Error) -> PyErr {
    let msg = err.to_string();
    match err {
        Error::Config(_) | Error::InvalidSpec(_) => ConfigError::new_err(msg),
        Error::Data(_) | Error::LabelOutOfRange { .. } => DataError::new_err(msg),
        Error::NonFinite(_) => NumericError::new_err(msg),
        _ => PostnasError::new_err(msg),
    }
}

fn to_dict<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PostnasError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse_split(name: &str) -> PyResult<Split> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(ConfigError::new_err(format!("unknown split {name:?}; expected train, val or test"))),
    }
}

/// A validated experiment configuration.
#[pyclass(name = "ExperimentConfig")]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[staticmethod]
    #[pyo3(signature = (text, overrides = Vec::new()))]
    fn from_toml(text: &str, overrides: Vec<String>) -> PyResult<Self> {
        ExperimentConfig::from_toml(text, &overrides).map(|inner| Self { inner }).map_err(to_py)
    }

    #[staticmethod]
    #[pyo3(signature = (path, overrides = Vec::new()))]
    fn load(path: PathBuf, overrides: Vec<String>) -> PyResult<Self> {
        ExperimentConfig::load(&path, &overrides).map(|inner| Self { inner }).map_err(to_py)
    }

    /// A copy with `key=value` overrides applied.
    fn with_overrides(&self, overrides: Vec<String>) -> PyResult<Self> {
        Self::from_toml(&self.inner.to_toml(), overrides)
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_output_dir(&mut self, dir: PathBuf) {
        self.inner.output_dir = Some(dir);
    }

    #[getter]
    fn output_dir(&self) -> Option<PathBuf> {
        self.inner.output_dir.clone()
    }

    fn run_dir(&self) -> PathBuf {
        self.inner.run_dir()
    }

    fn __repr__(&self) -> String {
        format!("ExperimentConfig(seed={}, digest={})", self.inner.seed, &self.inner.digest()[..12])
    }
}

/// A weight-sharing super-network with keep probabilities.
#[pyclass(name = "SuperNet")]
struct PySuperNet {
    inner: postnas_core::SuperNet,
}

#[pymethods]
impl PySuperNet {
    /// Fresh network for the config's search space and initialization.
    #[staticmethod]
    fn build(config: &PyConfig) -> PyResult<Self> {
        let cfg = &config.inner;
        postnas_core::SuperNet::build(&cfg.space, cfg.init_seed(), &cfg.init)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = postnas_core::checkpoint::Checkpoint::load(&path).map_err(to_py)?;
        ckpt.to_net().map(|inner| Self { inner }).map_err(to_py)
    }

    fn keep_probabilities(&self) -> Vec<f64> {
        self.inner.keep_probabilities()
    }

    fn expected_param_count(&self) -> f64 {
        self.inner.expected_param_count()
    }

    fn full_param_count(&self) -> usize {
        self.inner.full_param_count()
    }

    fn num_slices(&self) -> usize {
        self.inner.layout().num_slices()
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }

    /// Logits for a batch given as nested lists of shape `[batch, C, H, W]`,
    /// optionally with one hard mask (list of bools) for the whole batch.
    #[pyo3(signature = (inputs, mask = None))]
    fn forward(&self, inputs: Vec<Vec<Vec<Vec<f64>>>>, mask: Option<Vec<bool>>) -> PyResult<Vec<Vec<f64>>> {
        let batch = inputs.len();
        let shape = self.inner.spec().input_shape;
        let flat: Vec<f64> = inputs.into_iter().flatten().flatten().flatten().collect();
        let x = Tensor::new(vec![batch, shape[0], shape[1], shape[2]], flat).map_err(to_py)?;
        let logits = match mask {
            Some(bits) => self
                .inner
                .forward_masked(&x, &[postnas_core::MaskSample::from_bits(&bits)])
                .map_err(to_py)?,
            None => self.inner.forward(&x).map_err(to_py)?,
        };
        let classes = self.inner.spec().num_classes;
        Ok(logits.data().chunks(classes).map(|r| r.to_vec()).collect())
    }

    /// Logits of the network physically pruned to `bits`.
    fn prune_forward(&self, bits: Vec<bool>, inputs: Vec<Vec<Vec<Vec<f64>>>>) -> PyResult<Vec<Vec<f64>>> {
        let arch = Architecture::new(self.inner.layout(), bits).map_err(to_py)?;
        let pruned = postnas_core::prune(&self.inner, &arch).map_err(to_py)?;
        let batch = inputs.len();
        let shape = self.inner.spec().input_shape;
        let flat: Vec<f64> = inputs.into_iter().flatten().flatten().flatten().collect();
        let x = Tensor::new(vec![batch, shape[0], shape[1], shape[2]], flat).map_err(to_py)?;
        let logits = pruned.forward(&x).map_err(to_py)?;
        let classes = self.inner.spec().num_classes;
        Ok(logits.data().chunks(classes).map(|r| r.to_vec()).collect())
    }
}

/// A binary keep/drop choice for every slice of a search space.
#[pyclass(name = "Architecture")]
struct PyArchitecture {
    inner: Architecture,
}

#[pymethods]
impl PyArchitecture {
    #[staticmethod]
    fn from_toml(text: &str, config: &PyConfig) -> PyResult<Self> {
        Architecture::from_toml(text, &config.inner.space)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf, config: &PyConfig) -> PyResult<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| PostnasError::new_err(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, config)
    }

    fn bits(&self) -> Vec<bool> {
        self.inner.bits().to_vec()
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn has_path(&self) -> bool {
        self.inner.has_path()
    }

    fn dropped_channel_fraction(&self) -> f64 {
        self.inner.dropped_channel_fraction()
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }
}

#[pyfunction]
fn sample_hard(keep_probs: Vec<f64>, seed: u64) -> PyResult<Vec<f64>> {
    sampler::sample_hard(&keep_probs, seed).map(|s| s.values).map_err(to_py)
}

#[pyfunction]
fn sample_relaxed(keep_probs: Vec<f64>, tau: f64, seed: u64) -> PyResult<Vec<f64>> {
    let tau = sampler::Temperature::new(tau).map_err(to_py)?;
    sampler::sample_relaxed(&keep_probs, tau, seed).map(|s| s.values).map_err(to_py)
}

#[pyfunction]
fn sign_test_p(wins: usize, n: usize) -> f64 {
    postnas_core::oracle::sign_test_p(wins, n)
}

#[pyfunction]
fn space_digest(config: &PyConfig) -> String {
    SearchSpaceSpec::digest(&config.inner.space)
}

#[pyfunction]
fn train<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<Bound<'py, PyAny>> {
    let (summary, path) = experiment::cmd_train(&config.inner).map_err(to_py)?;
    let d = to_dict(py, &summary)?;
    d.set_item("checkpoint", path)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (config, checkpoint = None))]
fn search<'py>(py: Python<'py>, config: &PyConfig, checkpoint: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
    let ckpt = checkpoint.unwrap_or_else(|| config.inner.run_dir().join(experiment::CHECKPOINT_FILE));
    to_dict(py, &experiment::cmd_search(&config.inner, &ckpt).map_err(to_py)?)
}

#[pyfunction]
#[pyo3(signature = (config, checkpoint = None, architecture = None, split = "val"))]
fn evaluate<'py>(
    py: Python<'py>,
    config: &PyConfig,
    checkpoint: Option<PathBuf>,
    architecture: Option<PathBuf>,
    split: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let ckpt = checkpoint.unwrap_or_else(|| config.inner.run_dir().join(experiment::CHECKPOINT_FILE));
    let m = experiment::cmd_eval(&config.inner, &ckpt, architecture.as_deref(), parse_split(split)?).map_err(to_py)?;
    to_dict(py, &m)
}

#[pyfunction]
#[pyo3(signature = (config, checkpoint = None))]
fn enumerate<'py>(py: Python<'py>, config: &PyConfig, checkpoint: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
    let ckpt = checkpoint.unwrap_or_else(|| config.inner.run_dir().join(experiment::CHECKPOINT_FILE));
    to_dict(py, &experiment::cmd_enumerate(&config.inner, &ckpt).map_err(to_py)?)
}

/// Train, search, enumerate and evaluate; returns the manifest.
#[pyfunction]
fn run<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<Bound<'py, PyAny>> {
    to_dict(py, &experiment::cmd_run(&config.inner).map_err(to_py)?)
}

#[pymodule]
fn postnas(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("PostnasError", py.get_type::<PostnasError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("DataError", py.get_type::<DataError>())?;
    m.add("NumericError", py.get_type::<NumericError>())?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PySuperNet>()?;
    m.add_class::<PyArchitecture>()?;
    m.add_function(wrap_pyfunction!(sample_hard, m)?)?;
    m.add_function(wrap_pyfunction!(sample_relaxed, m)?)?;
    m.add_function(wrap_pyfunction!(sign_test_p, m)?)?;
    m.add_function(wrap_pyfunction!(space_digest, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(search, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(enumerate, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
