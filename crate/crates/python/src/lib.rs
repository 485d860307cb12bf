//! Python bindings. Reports come back as plain dicts with the same keys as the
//! JSON output of the command-line tool.

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde::Serialize;

use ::tailshift as ts;
use ts::{
    estimate_cvar, estimate_quantile, run_ladder, run_to_precision, solve_optimal_shift, strata_from_shift,
    stratified_estimate, LadderConfig, ModelSpec, Point, PrecisionConfig, QuantileConfig, RngStream, ShiftVector,
    Tail, WeightedBatch,
};

create_exception!(tailshift, TailshiftError, PyException);
create_exception!(tailshift, SimulatorError, TailshiftError);
create_exception!(tailshift, LadderStalled, TailshiftError);
create_exception!(tailshift, BudgetExhausted, TailshiftError);

fn err(e: ts::Error) -> PyErr {
    let msg = e.to_string();
    match e {
        ts::Error::Config { .. } | ts::Error::Domain(_) | ts::Error::Dimension { .. } => PyValueError::new_err(msg),
        ts::Error::Simulator { .. } => SimulatorError::new_err(msg),
        ts::Error::MaxLevelsExceeded { .. } => LadderStalled::new_err(msg),
        ts::Error::BudgetExhausted { .. } => BudgetExhausted::new_err(msg),
        _ => TailshiftError::new_err(msg),
    }
}

fn json_to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    use serde_json::Value;
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(a) => {
            let items = a.iter().map(|x| json_to_py(py, x)).collect::<PyResult<Vec<_>>>()?;
            PyList::new(py, items)?.into_any()
        }
        Value::Object(o) => {
            let d = PyDict::new(py);
            for (k, x) in o {
                d.set_item(k, json_to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

fn to_dict<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| TailshiftError::new_err(e.to_string()))?;
    json_to_py(py, &v)
}

fn parse_tail(tail: &str) -> PyResult<Tail> {
    tail.parse::<Tail>().map_err(err)
}

/// A response function of standard Gaussian inputs.
#[pyclass(frozen, name = "Model")]
struct PyModel {
    inner: ts::Model,
}

fn make(spec: ModelSpec, tail: &str, workers: usize) -> PyResult<PyModel> {
    let spec = spec.with_tail(parse_tail(tail)?);
    Ok(PyModel {
        inner: ts::Model::new(spec, workers).map_err(err)?,
    })
}

#[pymethods]
impl PyModel {
    /// h(x) = x_1 in dimension `dim`.
    #[staticmethod]
    #[pyo3(signature = (dim = 1, tail = "right"))]
    fn identity(dim: usize, tail: &str) -> PyResult<Self> {
        let spec = if dim == 1 {
            ModelSpec::identity(1)
        } else {
            ModelSpec::linear(vec![1.0], vec![0.0; dim.saturating_sub(1)])
        };
        make(spec, tail, 1)
    }

    /// h(x) = a . x_A + b . x_B.
    #[staticmethod]
    #[pyo3(signature = (a, b = Vec::new(), tail = "right"))]
    fn linear(a: Vec<f64>, b: Vec<f64>, tail: &str) -> PyResult<Self> {
        make(ModelSpec::linear(a, b), tail, 1)
    }

    /// `n_a` inputs with coefficient `coef_a` followed by `n_b` with `coef_b`.
    #[staticmethod]
    #[pyo3(signature = (n_a = 10, n_b = 100, coef_a = 1.0, coef_b = 0.01, tail = "right"))]
    fn linear_family(n_a: usize, n_b: usize, coef_a: f64, coef_b: f64, tail: &str) -> PyResult<Self> {
        make(ModelSpec::linear_family(n_a, coef_a, n_b, coef_b), tail, 1)
    }

    #[staticmethod]
    #[pyo3(signature = (dim = 2, tail = "right"))]
    fn skewed(dim: usize, tail: &str) -> PyResult<Self> {
        make(ModelSpec::skewed(dim), tail, 1)
    }

    /// A simulator process speaking the EVAL line protocol.
    #[staticmethod]
    #[pyo3(signature = (program, dim, args = Vec::new(), tail = "right", workers = 1))]
    fn external(program: String, dim: usize, args: Vec<String>, tail: &str, workers: usize) -> PyResult<Self> {
        make(ModelSpec::external(program, args, dim), tail, workers)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn tail(&self) -> String {
        self.inner.tail().to_string().to_lowercase()
    }

    fn evaluate(&self, py: Python<'_>, points: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let pts: Vec<Point> = points.into_iter().map(Point).collect();
        py.detach(|| self.inner.evaluate_values(&pts)).map_err(err)
    }

    /// Exact tail probability for the analytic models, None otherwise.
    fn exact_tail_probability(&self, gamma: f64) -> Option<f64> {
        self.inner.analytic_tail_prob(gamma)
    }

    /// Threshold with exact tail probability `p` for the analytic models.
    fn exact_quantile(&self, p: f64) -> Option<f64> {
        self.inner.spec().analytic_quantile(p)
    }

    fn __repr__(&self) -> String {
        format!("Model({:?}, dim={}, tail={})", self.inner.spec().kind, self.inner.dim(), self.tail())
    }
}

fn oriented(model: &ts::Model, gamma: f64) -> f64 {
    ts::model::oriented_response(model.tail(), gamma)
}

fn ladder(gamma: f64, batch: usize, rho: f64, max_levels: usize) -> LadderConfig {
    LadderConfig {
        n_per_level: batch,
        rho,
        max_levels,
        ..LadderConfig::new(gamma)
    }
}

/// Tail probability at `gamma` to relative half-width `precision`.
#[pyfunction]
#[pyo3(signature = (model, gamma, precision = 0.1, batch = 1000, rho = 0.1, seed = 0, max_runs = 1_000_000, confidence = 0.95, max_levels = 30))]
#[allow(clippy::too_many_arguments)]
fn tail_probability<'py>(
    py: Python<'py>,
    model: &PyModel,
    gamma: f64,
    precision: f64,
    batch: usize,
    rho: f64,
    seed: u64,
    max_runs: usize,
    confidence: f64,
    max_levels: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let m = &model.inner;
    let cfg = ladder(oriented(m, gamma), batch, rho, max_levels);
    let prec = PrecisionConfig {
        target: precision,
        batch,
        confidence,
        max_runs,
    };
    let run = py
        .detach(|| run_to_precision(m, &cfg, &prec, &RngStream::new(seed, 0)))
        .map_err(err)?;
    let mut report = run.report;
    report.gamma = gamma;
    let out = PyDict::new(py);
    out.set_item("report", to_dict(py, &report)?)?;
    out.set_item("trace", to_dict(py, &run.trace)?)?;
    Ok(out.into_any())
}

/// Threshold whose tail probability is `p`.
#[pyfunction]
#[pyo3(signature = (model, p, precision = 0.005, batch = 1000, rho = 0.1, seed = 0, max_runs = 1_000_000, confidence = 0.95))]
#[allow(clippy::too_many_arguments)]
fn tail_quantile<'py>(
    py: Python<'py>,
    model: &PyModel,
    p: f64,
    precision: f64,
    batch: usize,
    rho: f64,
    seed: u64,
    max_runs: usize,
    confidence: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = QuantileConfig {
        ladder: ladder(f64::INFINITY, batch, rho, 30),
        precision,
        batch,
        confidence,
        max_runs,
    };
    let run = py
        .detach(|| estimate_quantile(&model.inner, p, &cfg, &RngStream::new(seed, 0)))
        .map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("report", to_dict(py, &run.report)?)?;
    out.set_item("trace", to_dict(py, &run.trace)?)?;
    Ok(out.into_any())
}

/// Tail probability and conditional tail mean from the same runs.
#[pyfunction]
#[pyo3(signature = (model, gamma, precision = 0.1, batch = 1000, rho = 0.1, seed = 0, max_runs = 1_000_000, confidence = 0.95))]
#[allow(clippy::too_many_arguments)]
fn tail_mean<'py>(
    py: Python<'py>,
    model: &PyModel,
    gamma: f64,
    precision: f64,
    batch: usize,
    rho: f64,
    seed: u64,
    max_runs: usize,
    confidence: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let m = &model.inner;
    let g = oriented(m, gamma);
    let cfg = ladder(g, batch, rho, 30);
    let prec = PrecisionConfig {
        target: precision,
        batch,
        confidence,
        max_runs,
    };
    let (run, cvar) = py
        .detach(|| {
            let run = run_to_precision(m, &cfg, &prec, &RngStream::new(seed, 0))?;
            let c = estimate_cvar(&run.moments, g, m.tail(), confidence)?;
            Ok((run, c))
        })
        .map_err(err)?;
    let mut report = run.report;
    report.gamma = gamma;
    let out = PyDict::new(py);
    out.set_item("probability", to_dict(py, &report)?)?;
    out.set_item("cvar", to_dict(py, &cvar)?)?;
    out.set_item("trace", to_dict(py, &run.trace)?)?;
    Ok(out.into_any())
}

/// Stratified estimate along the shift found by the ladder.
#[pyfunction]
#[pyo3(signature = (model, gamma, strata = 20, runs = 10_000, pilot = 0.2, batch = 1000, rho = 0.1, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn stratified<'py>(
    py: Python<'py>,
    model: &PyModel,
    gamma: f64,
    strata: usize,
    runs: usize,
    pilot: f64,
    batch: usize,
    rho: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let m = &model.inner;
    let g = oriented(m, gamma);
    let cfg = ladder(g, batch, rho, 30);
    let (theta, trace, run) = py
        .detach(|| {
            let rng = RngStream::new(seed, 0);
            let (theta, trace) = run_ladder(m, &cfg, &rng)?;
            let spec = strata_from_shift(&theta, strata)?;
            let run = stratified_estimate(m, g, &spec, pilot, runs, &rng)?;
            Ok((theta, trace, run))
        })
        .map_err(err)?;
    let mut report = run.report;
    report.gamma = gamma;
    report.theta_final = theta;
    let out = PyDict::new(py);
    out.set_item("report", to_dict(py, &report)?)?;
    out.set_item("strata", to_dict(py, &run.strata)?)?;
    out.set_item("trace", to_dict(py, &trace)?)?;
    Ok(out.into_any())
}

/// Returns `(theta, trace)` from the multilevel ladder.
#[pyfunction]
#[pyo3(signature = (model, gamma, batch = 1000, rho = 0.1, seed = 0, max_levels = 30))]
fn shift_ladder<'py>(
    py: Python<'py>,
    model: &PyModel,
    gamma: f64,
    batch: usize,
    rho: f64,
    seed: u64,
    max_levels: usize,
) -> PyResult<(Vec<f64>, Bound<'py, PyAny>)> {
    let m = &model.inner;
    let cfg = ladder(oriented(m, gamma), batch, rho, max_levels);
    let (theta, trace) = py.detach(|| run_ladder(m, &cfg, &RngStream::new(seed, 0))).map_err(err)?;
    Ok((theta.0, to_dict(py, &trace)?))
}

/// Minimizes the second-moment criterion on one batch drawn under `theta_prev`.
#[pyfunction]
#[pyo3(signature = (points, responses, theta_prev, gamma, tol = 1e-8, max_iter = 50))]
fn optimal_shift<'py>(
    py: Python<'py>,
    points: Vec<Vec<f64>>,
    responses: Vec<f64>,
    theta_prev: Vec<f64>,
    gamma: f64,
    tol: f64,
    max_iter: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let d = theta_prev.len();
    let batch = WeightedBatch::new(
        points.into_iter().map(Point).collect(),
        responses,
        ShiftVector(theta_prev),
        gamma,
    )
    .map_err(err)?;
    let sol = py
        .detach(|| solve_optimal_shift(&batch, &ShiftVector::zeros(d), tol, max_iter))
        .map_err(err)?;
    to_dict(py, &sol)
}

#[pymodule]
fn tailshift(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(tail_probability, m)?)?;
    m.add_function(wrap_pyfunction!(tail_quantile, m)?)?;
    m.add_function(wrap_pyfunction!(tail_mean, m)?)?;
    m.add_function(wrap_pyfunction!(stratified, m)?)?;
    m.add_function(wrap_pyfunction!(shift_ladder, m)?)?;
    m.add_function(wrap_pyfunction!(optimal_shift, m)?)?;
    let py = m.py();
    m.add("TailshiftError", py.get_type::<TailshiftError>())?;
    m.add("SimulatorError", py.get_type::<SimulatorError>())?;
    m.add("LadderStalled", py.get_type::<LadderStalled>())?;
    m.add("BudgetExhausted", py.get_type::<BudgetExhausted>())?;
    Ok(())
}
