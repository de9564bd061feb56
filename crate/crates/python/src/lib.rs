//! Python bindings for the photon-state classification toolkit: source
//! simulation, third-order correlation, the closed-form reference model,
//! the threshold baseline, and trained-model inference.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use g3class::cnn::{ModelConfig, ModelParams};
use g3class::correlator;
use g3class::error::Error;
use g3class::source;
use g3class::theory;

fn to_py_err(err: Error) -> PyErr {
    match err {
        Error::InvalidArgument(_) | Error::InvalidInput(_) => {
            PyValueError::new_err(err.to_string())
        }
        _ => PyIOError::new_err(err.to_string()),
    }
}

/// Per-pulse photon counts at the three virtual detectors.
#[pyclass]
struct DetectionRecord {
    inner: source::DetectionRecord,
}

#[pymethods]
impl DetectionRecord {
    /// Number of pulses in the record.
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn d1(&self) -> Vec<u16> {
        self.inner.d1.clone()
    }

    #[getter]
    fn d2(&self) -> Vec<u16> {
        self.inner.d2.clone()
    }

    #[getter]
    fn d3(&self) -> Vec<u16> {
        self.inner.d3.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn write(&self, path: &str) -> PyResult<()> {
        self.inner
            .write_binary(std::path::Path::new(path))
            .map_err(to_py_err)
    }

    #[staticmethod]
    fn read(path: &str) -> PyResult<DetectionRecord> {
        source::DetectionRecord::read_binary(std::path::Path::new(path))
            .map(|inner| DetectionRecord { inner })
            .map_err(to_py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "DetectionRecord(pulses={}, fock_n={}, qlp={:.3}, seed={})",
            self.inner.len(),
            self.inner.fock_n,
            self.inner.qlp_milli as f64 / 1000.0,
            self.inner.seed
        )
    }
}

/// Normalized third-order correlation map.
#[pyclass]
struct CorrelationMap {
    inner: correlator::CorrelationMap,
}

#[pymethods]
impl CorrelationMap {
    #[getter]
    fn valid(&self) -> bool {
        self.inner.valid()
    }

    #[getter]
    fn tau_max(&self) -> u8 {
        self.inner.tau_max()
    }

    /// The map as nested lists, rows over t13 ascending.
    fn values(&self) -> Vec<Vec<f64>> {
        self.inner
            .values()
            .rows()
            .into_iter()
            .map(|row| row.to_vec())
            .collect()
    }

    /// Value at the given delays (pulse periods).
    fn value_at(&self, tau12: i32, tau13: i32) -> f64 {
        self.inner.value_at(tau12, tau13)
    }

    fn write(&self, path: &str) -> PyResult<()> {
        self.inner
            .write_binary(std::path::Path::new(path))
            .map_err(to_py_err)
    }

    #[staticmethod]
    fn read(path: &str) -> PyResult<CorrelationMap> {
        correlator::CorrelationMap::read_binary(std::path::Path::new(path))
            .map(|inner| CorrelationMap { inner })
            .map_err(to_py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "CorrelationMap(dim={0}x{0}, valid={1})",
            self.inner.dim(),
            self.inner.valid()
        )
    }
}

/// Simulates a pulsed Fock/coherent source into a detection record.
#[pyfunction]
#[pyo3(signature = (fock_n, qlp, num_events, seed=0))]
fn simulate(fock_n: u8, qlp: f64, num_events: usize, seed: u64) -> PyResult<DetectionRecord> {
    let spec = source::SourceSpec::new(fock_n, qlp).map_err(to_py_err)?;
    source::simulate(&spec, num_events, seed)
        .map(|inner| DetectionRecord { inner })
        .map_err(to_py_err)
}

/// Computes the normalized third-order correlation map of a record.
#[pyfunction]
#[pyo3(signature = (record, tau_max=16))]
fn g3_map(record: &DetectionRecord, tau_max: u8) -> PyResult<CorrelationMap> {
    correlator::g3_map(&record.inner, tau_max)
        .map(|inner| CorrelationMap { inner })
        .map_err(to_py_err)
}

/// Returns `(g3_zero, g2_zero_est)` for a valid map.
#[pyfunction]
fn critical_points(map: &CorrelationMap) -> PyResult<(f64, f64)> {
    correlator::critical_points(&map.inner)
        .map(|cp| (cp.g3_zero, cp.g2_zero_est))
        .map_err(to_py_err)
}

/// Truncates and rescales a 33x33 map into the 32x32 unit-range input of
/// the classifier.
#[pyfunction]
fn preprocess(map: &CorrelationMap) -> PyResult<Vec<Vec<f32>>> {
    let features = correlator::preprocess(&map.inner).map_err(to_py_err)?;
    Ok(features
        .values()
        .rows()
        .into_iter()
        .map(|row| row.to_vec())
        .collect())
}

/// Closed-form zero-delay correlation of a Fock/coherent mixture.
#[pyfunction]
fn gk_zero(n: u32, k: u32, p: f64) -> PyResult<f64> {
    Ok(theory::gk_zero(
        &theory::GkQuery::new(n, k, p).map_err(to_py_err)?,
    ))
}

/// Reference table rows: `(qlp, [(g2, g3) for n in (1, 2, 3)])`.
#[pyfunction]
fn table1() -> Vec<(f64, Vec<(f64, f64)>)> {
    let table = theory::table1();
    theory::TABLE1_QLP
        .iter()
        .enumerate()
        .map(|(row, &p)| (p, table[row].to_vec()))
        .collect()
}

/// Threshold baseline on the two critical values: returns
/// `(class, qlp_est, residual)`.
#[pyfunction]
fn baseline_classify(g2_zero: f64, g3_zero: f64) -> PyResult<(String, f64, f64)> {
    if !(g2_zero.is_finite() && g3_zero.is_finite() && g2_zero >= 0.0 && g3_zero >= 0.0) {
        return Err(PyValueError::new_err(
            "critical values must be finite and non-negative",
        ));
    }
    let verdict = theory::baseline_classify(g2_zero, g3_zero);
    Ok((
        verdict.photon_class.code().to_string(),
        verdict.qlp_est,
        verdict.residual,
    ))
}

/// Noiseless correlation map of a mixture (for references and tests).
#[pyfunction]
#[pyo3(signature = (fock_n, qlp, tau_max=16))]
fn analytic_map(fock_n: u8, qlp: f64, tau_max: u8) -> PyResult<CorrelationMap> {
    theory::analytic_map(fock_n, qlp, tau_max)
        .map(|inner| CorrelationMap { inner })
        .map_err(to_py_err)
}

/// A trained convolutional classifier.
#[pyclass]
struct Model {
    params: ModelParams,
}

#[pymethods]
impl Model {
    /// Loads weights written by the `train` subcommand.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Model> {
        ModelParams::load(std::path::Path::new(path), &ModelConfig::default())
            .map(|params| Model { params })
            .map_err(to_py_err)
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    /// Classifies a correlation map; returns `(class, scores)` with the
    /// four softmax confidences ordered (COH, F1, F2, F3).
    fn predict(&self, map: &CorrelationMap) -> PyResult<(String, Vec<f64>)> {
        self.params
            .predict(&map.inner)
            .map(|(class, scores)| (class.code().to_string(), scores.0.to_vec()))
            .map_err(to_py_err)
    }
}

#[pymodule]
fn g3class_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<DetectionRecord>()?;
    m.add_class::<CorrelationMap>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(g3_map, m)?)?;
    m.add_function(wrap_pyfunction!(critical_points, m)?)?;
    m.add_function(wrap_pyfunction!(preprocess, m)?)?;
    m.add_function(wrap_pyfunction!(gk_zero, m)?)?;
    m.add_function(wrap_pyfunction!(table1, m)?)?;
    m.add_function(wrap_pyfunction!(baseline_classify, m)?)?;
    m.add_function(wrap_pyfunction!(analytic_map, m)?)?;
    Ok(())
}
