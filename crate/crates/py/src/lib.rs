//! Python module `ccqfl`: circuits, shadow publication, client gradients,
//! aggregation, the wire format, and the training harness.

use std::path::PathBuf;

use ccqfl::experiment::{self, parse_config};
use ccqfl::federation::{
    aggregate as aggregate_msgs, client_local_gradient, ClientState, LocalGradientMsg,
    OptimizerKind, ServerState,
};
use ccqfl::qnn::{predictions, EncodedSample, ExactSource, GradientVector, LogisticHead};
use ccqfl::shadows::{collect_shadow_set, MomConfig};
use ccqfl::sim::build_hea;
use ccqfl::verify::{self, Suite};
use ccqfl::wire;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

create_exception!(ccqfl, CcqflError, PyException);

fn py_err(e: ccqfl::Error) -> PyErr {
    CcqflError::new_err(e.to_string())
}

fn encode(features: &[Vec<f64>], labels: &[u8], n_qubits: usize) -> PyResult<Vec<EncodedSample>> {
    if features.len() != labels.len() {
        return Err(CcqflError::new_err(format!(
            "{} feature rows but {} labels",
            features.len(),
            labels.len()
        )));
    }
    features
        .iter()
        .zip(labels)
        .map(|(x, &y)| EncodedSample::from_features(x, y, n_qubits))
        .collect::<ccqfl::Result<_>>()
        .map_err(py_err)
}

/// Exact model outputs Ẽ(θ) = ⟨Σ_j x_j Z_j⟩ for each feature row.
#[pyfunction]
fn hea_expectations(
    n_qubits: usize,
    layers: usize,
    theta: Vec<f64>,
    features: Vec<Vec<f64>>,
) -> PyResult<Vec<f64>> {
    let ansatz = build_hea(n_qubits, layers).map_err(py_err)?;
    let source = ExactSource::at(&ansatz, &theta).map_err(py_err)?;
    let labels = vec![0; features.len()];
    let samples = encode(&features, &labels, n_qubits)?;
    predictions(&source, samples.iter().map(|s| &s.observable)).map_err(py_err)
}

/// Parameter server holding θ and optimizer state.
#[pyclass(name = "Server")]
struct PyServer {
    inner: ServerState,
}

#[pymethods]
impl PyServer {
    #[new]
    #[pyo3(signature = (n_qubits, layers, optimizer = "adam", eta = 0.003, seed = 0))]
    fn new(n_qubits: usize, layers: usize, optimizer: &str, eta: f64, seed: u64) -> PyResult<Self> {
        let kind = match optimizer {
            "adam" => OptimizerKind::Adam,
            "sgd" => OptimizerKind::Sgd,
            other => return Err(CcqflError::new_err(format!("unknown optimizer {other:?}"))),
        };
        let ansatz = build_hea(n_qubits, layers).map_err(py_err)?;
        let inner = ServerState::random_init(ansatz, kind, eta, seed).map_err(py_err)?;
        Ok(PyServer { inner })
    }

    #[getter]
    fn theta(&self) -> Vec<f64> {
        self.inner.theta().to_vec()
    }

    #[getter]
    fn iteration(&self) -> u32 {
        self.inner.iteration()
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.theta().len()
    }

    /// Encoded ShadowSet message for the current θ.
    #[pyo3(signature = (shots, chunks, seed = 0))]
    fn publish<'py>(
        &self,
        py: Python<'py>,
        shots: usize,
        chunks: usize,
        seed: u64,
    ) -> PyResult<Bound<'py, PyBytes>> {
        let mom = MomConfig::new(shots, chunks).map_err(py_err)?;
        let set = collect_shadow_set(
            self.inner.ansatz(),
            self.inner.theta(),
            &mom,
            seed,
            self.inner.iteration(),
        )
        .map_err(py_err)?;
        Ok(PyBytes::new(py, &wire::encode_shadow_set(&set)))
    }

    /// Applies one optimizer update with a global gradient.
    fn step(&mut self, gradient: Vec<f64>) -> PyResult<()> {
        self.inner
            .optimizer_step(&GradientVector(gradient))
            .map_err(py_err)
    }
}

/// Local gradient of a client's samples from an encoded ShadowSet; returns
/// the encoded LocalGradient message.
#[pyfunction]
#[pyo3(signature = (shadow_set, features, labels, client_id = 0, logit_scale = 1.0))]
fn client_gradient<'py>(
    py: Python<'py>,
    shadow_set: &[u8],
    features: Vec<Vec<f64>>,
    labels: Vec<u8>,
    client_id: u16,
    logit_scale: f64,
) -> PyResult<Bound<'py, PyBytes>> {
    let set = wire::decode_shadow_set(shadow_set).map_err(py_err)?;
    let samples = encode(&features, &labels, set.n_qubits())?;
    let client = ClientState::new(client_id, samples, set.mom()).map_err(py_err)?;
    let head = LogisticHead::new(logit_scale).map_err(py_err)?;
    let msg = client_local_gradient(&client, &set, &head).map_err(py_err)?;
    Ok(PyBytes::new(py, &wire::encode_local_gradient(&msg)))
}

/// Decodes a LocalGradient message into a dict.
#[pyfunction]
fn decode_gradient<'py>(py: Python<'py>, message: &[u8]) -> PyResult<Bound<'py, PyDict>> {
    let m = wire::decode_local_gradient(message).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("client_id", m.client_id)?;
    d.set_item("iteration", m.iteration)?;
    d.set_item("samples", m.samples)?;
    d.set_item("gradient", m.gradient.0)?;
    d.set_item("local_loss", m.local_loss)?;
    Ok(d)
}

#[pyfunction]
fn encode_gradient<'py>(
    py: Python<'py>,
    client_id: u16,
    iteration: u32,
    samples: u32,
    gradient: Vec<f64>,
    local_loss: f64,
) -> Bound<'py, PyBytes> {
    let msg = LocalGradientMsg {
        client_id,
        iteration,
        samples,
        gradient: GradientVector(gradient),
        local_loss,
    };
    PyBytes::new(py, &wire::encode_local_gradient(&msg))
}

/// Header fields of an encoded ShadowSet.
#[pyfunction]
fn shadow_header<'py>(py: Python<'py>, message: &[u8]) -> PyResult<Bound<'py, PyDict>> {
    let h = wire::decode_shadow_header(message).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("iteration", h.iteration)?;
    d.set_item("n_qubits", h.n_qubits)?;
    d.set_item("p", h.n_params)?;
    d.set_item("M", h.shots)?;
    d.set_item("M2", h.chunks)?;
    Ok(d)
}

/// Weighted average of encoded LocalGradient messages.
#[pyfunction]
fn aggregate(messages: Vec<Vec<u8>>) -> PyResult<Vec<f64>> {
    let msgs = messages
        .iter()
        .map(|m| wire::decode_local_gradient(m))
        .collect::<ccqfl::Result<Vec<_>>>()
        .map_err(py_err)?;
    aggregate_msgs(&msgs).map(|g| g.0).map_err(py_err)
}

/// Runs a self-check suite; returns (passed, report).
#[pyfunction]
#[pyo3(signature = (suite, seed = 0))]
fn verify_suite(suite: &str, seed: u64) -> PyResult<(bool, String)> {
    let s: Suite = suite.parse().map_err(py_err)?;
    let r = verify::run(s, seed).map_err(py_err)?;
    Ok((r.passed(), r.to_string()))
}

/// Trains from a config file and returns the history as a list of dicts.
/// Output files are written only when `out` is given.
#[pyfunction]
#[pyo3(signature = (config, seed = None, out = None))]
fn train<'py>(
    py: Python<'py>,
    config: PathBuf,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let mut cfg = parse_config(&config).map_err(py_err)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let result = py.detach(|| experiment::run(&cfg)).map_err(py_err)?;
    if let Some(dir) = out {
        cfg.out_dir = dir.clone();
        experiment::write_outputs(&dir, &cfg, &result).map_err(py_err)?;
    }
    result
        .history
        .records
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("epoch", r.epoch)?;
            d.set_item("train_loss", r.train_loss)?;
            d.set_item("train_acc", r.train_accuracy)?;
            d.set_item("test_acc", r.test_accuracy)?;
            d.set_item("grad_norm", r.grad_norm)?;
            d.set_item("wall_ms", r.wall_ms)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
#[pyo3(name = "ccqfl")]
fn ccqfl_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CcqflError", m.py().get_type::<CcqflError>())?;
    m.add_class::<PyServer>()?;
    m.add_function(wrap_pyfunction!(hea_expectations, m)?)?;
    m.add_function(wrap_pyfunction!(client_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(decode_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(encode_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(shadow_header, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(verify_suite, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
