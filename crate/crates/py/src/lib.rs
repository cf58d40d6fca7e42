//! Python bindings. Images and masks cross the boundary as lists of rows.

use fedmix::orchestrator::{run_experiment_with, ExperimentConfig, RunOptions};
use fedmix::synth::{ClientDataset, DataSpec, Sample, ShiftSpec, SupervisionLevel};
use fedmix::{Aggregation, Error, Grid2D, ModelSpec, ParamVector};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn grid(rows: Vec<Vec<f64>>) -> PyResult<Grid2D> {
    let height = rows.len();
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Grid2D::new(height, width, rows.concat()).map_err(to_py)
}

fn rows(g: &Grid2D) -> Vec<Vec<f64>> {
    g.values().chunks(g.width().max(1)).map(<[f64]>::to_vec).collect()
}

fn level(tag: &str) -> PyResult<SupervisionLevel> {
    SupervisionLevel::from_tag(tag).ok_or_else(|| PyValueError::new_err(format!("unknown supervision level {tag:?}")))
}

#[pyclass(name = "ModelSpec", frozen)]
struct PyModelSpec(ModelSpec);

#[pymethods]
impl PyModelSpec {
    #[new]
    #[pyo3(signature = (height=32, width=32, conv1_width=8, conv2_width=8, kernel=3))]
    fn new(height: usize, width: usize, conv1_width: usize, conv2_width: usize, kernel: usize) -> PyResult<Self> {
        let spec = ModelSpec { height, width, conv1_width, conv2_width, kernel };
        spec.validate().map_err(to_py)?;
        Ok(Self(spec))
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.0.param_count()
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.0.height, self.0.width)
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.0)
    }
}

#[pyfunction]
fn dice_coefficient(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    fedmix::dice_coefficient(&grid(a)?, &grid(b)?).map_err(to_py)
}

#[pyfunction]
fn soft_dice_loss(pred: Vec<Vec<f64>>, target: Vec<Vec<f64>>) -> PyResult<f64> {
    fedmix::soft_dice_loss(&grid(pred)?, &grid(target)?).map_err(to_py)
}

#[pyfunction]
fn soft_dice_loss_gradient(pred: Vec<Vec<f64>>, target: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(&fedmix::soft_dice_loss_gradient(&grid(pred)?, &grid(target)?).map_err(to_py)?))
}

#[pyfunction]
fn init_params(spec: PyRef<'_, PyModelSpec>, seed: u64) -> Vec<f64> {
    fedmix::init_params(&spec.0, seed).into_inner()
}

#[pyfunction]
fn forward(spec: PyRef<'_, PyModelSpec>, params: Vec<f64>, image: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let out = fedmix::forward(&spec.0, &ParamVector::new(params), &grid(image)?).map_err(to_py)?;
    Ok(rows(&out))
}

#[pyfunction]
fn fedavg_weights(counts: Vec<usize>) -> PyResult<Vec<f64>> {
    fedmix::fedavg_weights(&counts).map_err(to_py)
}

/// `losses` entries may be `None` for clients that trained on nothing.
#[pyfunction]
fn adaptive_weights(counts: Vec<usize>, losses: Vec<Option<f64>>, beta: f64, lambda: f64) -> PyResult<Vec<f64>> {
    fedmix::adaptive_weights(&counts, &losses, beta, lambda).map_err(to_py)
}

#[pyfunction]
fn apply_update(theta: Vec<f64>, deltas: Vec<Vec<f64>>, weights: Vec<f64>) -> PyResult<Vec<f64>> {
    let deltas: Vec<ParamVector> = deltas.into_iter().map(ParamVector::new).collect();
    fedmix::apply_update(&ParamVector::new(theta), &deltas, &weights)
        .map(ParamVector::into_inner)
        .map_err(to_py)
}

#[pyclass(name = "ClientDataset", frozen)]
struct PyClientDataset(ClientDataset);

impl PyClientDataset {
    fn split(&self, test: bool) -> &[Sample] {
        if test {
            self.0.test()
        } else {
            self.0.train()
        }
    }

    fn sample(&self, index: usize, test: bool) -> PyResult<&Sample> {
        self.split(test)
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("sample index {index} out of range")))
    }
}

#[pymethods]
impl PyClientDataset {
    #[getter]
    fn client_id(&self) -> u32 {
        self.0.client_id
    }

    #[getter]
    fn level(&self) -> String {
        self.0.level.tag().to_string()
    }

    #[getter]
    fn train_len(&self) -> usize {
        self.0.train().len()
    }

    #[getter]
    fn test_len(&self) -> usize {
        self.0.test().len()
    }

    #[pyo3(signature = (index, test=false))]
    fn image(&self, index: usize, test: bool) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(self.sample(index, test)?.image()))
    }

    #[pyo3(signature = (index, test=false))]
    fn truth_mask(&self, index: usize, test: bool) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(self.sample(index, test)?.truth_mask()))
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyfunction]
#[pyo3(signature = (client_id, level, samples, seed, height=32, width=32))]
fn generate_client(
    client_id: u32,
    level: &str,
    samples: usize,
    seed: u64,
    height: usize,
    width: usize,
) -> PyResult<PyClientDataset> {
    let spec = DataSpec { height, width, shift: ShiftSpec::default() };
    fedmix::generate_client(client_id, &spec, self::level(level)?, samples, seed)
        .map(PyClientDataset)
        .map_err(to_py)
}

#[pyclass(name = "ExperimentConfig", frozen)]
struct PyExperimentConfig(ExperimentConfig);

#[pymethods]
impl PyExperimentConfig {
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        fedmix::config::parse_config_str(text).map(Self).map_err(to_py)
    }

    fn to_toml(&self) -> String {
        fedmix::config::to_toml(&self.0)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }

    #[getter]
    fn rounds(&self) -> usize {
        self.0.rounds
    }

    #[getter]
    fn aggregation(&self) -> &'static str {
        match self.0.aggregation {
            Aggregation::FedAvg => "fedavg",
            Aggregation::Adaptive => "adaptive",
        }
    }

    #[getter]
    fn levels(&self) -> Vec<String> {
        self.0.clients.iter().map(|c| c.level.tag().to_string()).collect()
    }
}

/// Runs an experiment; returns `(round, client_id, loss, selected, weight, test_dice)` rows.
#[pyfunction]
#[pyo3(signature = (config, workers=1))]
fn run_experiment(
    py: Python<'_>,
    config: PyRef<'_, PyExperimentConfig>,
    workers: usize,
) -> PyResult<Vec<(usize, u32, Option<f64>, usize, Option<f64>, f64)>> {
    let cfg = config.0.clone();
    let outcome = py
        .detach(move || run_experiment_with(&cfg, RunOptions { workers, on_round: None }))
        .map_err(to_py)?;
    Ok(outcome
        .reports
        .iter()
        .flat_map(|r| {
            r.clients
                .iter()
                .map(move |c| (r.round, c.client_id, c.loss, c.selected, c.weight, c.test_dice))
        })
        .collect())
}

#[pymodule]
#[pyo3(name = "fedmix")]
fn fedmix_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelSpec>()?;
    m.add_class::<PyClientDataset>()?;
    m.add_class::<PyExperimentConfig>()?;
    m.add_function(wrap_pyfunction!(dice_coefficient, m)?)?;
    m.add_function(wrap_pyfunction!(soft_dice_loss, m)?)?;
    m.add_function(wrap_pyfunction!(soft_dice_loss_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(init_params, m)?)?;
    m.add_function(wrap_pyfunction!(forward, m)?)?;
    m.add_function(wrap_pyfunction!(fedavg_weights, m)?)?;
    m.add_function(wrap_pyfunction!(adaptive_weights, m)?)?;
    m.add_function(wrap_pyfunction!(apply_update, m)?)?;
    m.add_function(wrap_pyfunction!(generate_client, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
