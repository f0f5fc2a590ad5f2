use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use relperf_core::chaos_lab::{run_experiment, ChaosConfig};
use relperf_core::fixed_point_finite::{solve_equilibrium_weights, SolveOptions};
use relperf_core::graphon::{self, Graphon, StepGraphon};
use relperf_core::graphon_game::{solve_graphon_equilibrium_det, LabelGrid};
use relperf_core::indifference;
use relperf_core::market;
use relperf_core::Error;
use serde::de::DeserializeOwned;
use serde::Serialize;

fn err(e: Error) -> PyErr {
    match e {
        Error::Parameter(_) | Error::Domain(_) | Error::RowSum { .. } | Error::ExactInfeasible { .. } | Error::Capability(_) | Error::Json(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Python object → Rust value through its JSON form.
fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import_bound("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_py<T: Serialize>(py: Python<'_>, v: &T) -> PyResult<PyObject> {
    let text = serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import_bound("json")?.call_method1("loads", (text,))?.unbind())
}

#[pyclass(frozen)]
#[derive(Clone)]
struct TimeGrid(market::TimeGrid);

#[pymethods]
impl TimeGrid {
    #[new]
    fn new(horizon: f64, steps: usize) -> PyResult<Self> {
        market::TimeGrid::new(horizon, steps).map(TimeGrid).map_err(err)
    }
    #[getter]
    fn horizon(&self) -> f64 {
        self.0.horizon
    }
    #[getter]
    fn steps(&self) -> usize {
        self.0.steps
    }
    fn knots(&self) -> Vec<f64> {
        (0..=self.0.steps).map(|k| self.0.knot(k)).collect()
    }
}

/// Market and preference coefficients of one agent, built from the same dict
/// layout the CLI configs use.
#[pyclass(frozen)]
#[derive(Clone)]
struct AgentCoeffs(market::AgentCoeffs);

#[pymethods]
impl AgentCoeffs {
    #[new]
    fn new(spec: &Bound<'_, PyAny>) -> PyResult<Self> {
        Ok(AgentCoeffs(from_py(spec)?))
    }
    #[staticmethod]
    #[pyo3(signature = (sigma, sigma_star, theta, eta, xi, bound=None))]
    fn scalar(sigma: f64, sigma_star: f64, theta: f64, eta: f64, xi: f64, bound: Option<f64>) -> Self {
        let set = match bound {
            Some(b) => market::ConvexSet::Box { lower: vec![-b], upper: vec![b] },
            None => market::ConvexSet::FullSpace,
        };
        AgentCoeffs(market::AgentCoeffs::scalar(sigma, sigma_star, theta, eta, xi, set))
    }
    fn to_dict(&self, py: Python<'_>) -> PyResult<PyObject> {
        to_py(py, &self.0)
    }
}

#[pyclass(frozen)]
#[derive(Clone)]
struct InteractionGraph(graphon::InteractionGraph);

#[pymethods]
impl InteractionGraph {
    #[staticmethod]
    fn complete(n: usize) -> Self {
        InteractionGraph(graphon::InteractionGraph::complete(n))
    }
    #[getter]
    fn n(&self) -> usize {
        self.0.n()
    }
    fn edges(&self) -> Vec<(usize, usize)> {
        self.0.edges().into_iter().map(|[a, b]| (a, b)).collect()
    }
    fn weights(&self) -> PyResult<Weights> {
        graphon::normalized_weights(&self.0).map(Weights).map_err(err)
    }
}

#[pyclass(frozen)]
#[derive(Clone)]
struct Weights(graphon::Weights);

#[pymethods]
impl Weights {
    #[new]
    fn new(rows: Vec<Vec<f64>>) -> PyResult<Self> {
        graphon::Weights::from_rows(rows).map(Weights).map_err(err)
    }
    fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.0.n()).map(|i| self.0.row(i).to_vec()).collect()
    }
    fn row_sum(&self, i: usize) -> f64 {
        self.0.row_sum(i)
    }
}

#[pyclass(frozen)]
struct FiniteEquilibrium(relperf_core::fixed_point_finite::FiniteEquilibrium);

#[pymethods]
impl FiniteEquilibrium {
    /// pi[agent][step][dim]
    #[getter]
    fn pi(&self) -> Vec<Vec<Vec<f64>>> {
        self.0.pi.clone()
    }
    #[getter]
    fn gamma0(&self) -> Vec<f64> {
        self.0.gamma0.clone()
    }
    #[getter]
    fn value0(&self) -> Vec<f64> {
        self.0.value0.clone()
    }
    fn to_dict(&self, py: Python<'_>) -> PyResult<PyObject> {
        to_py(py, &self.0)
    }
}

#[pyclass(frozen)]
struct GraphonEquilibrium(relperf_core::graphon_game::GraphonEquilibrium);

#[pymethods]
impl GraphonEquilibrium {
    #[getter]
    fn labels(&self) -> Vec<f64> {
        self.0.labels.clone()
    }
    /// pi[label][step][dim]
    #[getter]
    fn pi(&self) -> Vec<Vec<Vec<f64>>> {
        self.0.pi.clone()
    }
    #[getter]
    fn y0(&self) -> Vec<f64> {
        self.0.y0.clone()
    }
    #[getter]
    fn value0(&self) -> Vec<f64> {
        self.0.value0.clone()
    }
    fn to_dict(&self, py: Python<'_>) -> PyResult<PyObject> {
        to_py(py, &self.0)
    }
}

fn step_graphon(obj: &Bound<'_, PyAny>) -> PyResult<StepGraphon> {
    match obj.extract::<Vec<Vec<f64>>>() {
        Ok(w) => StepGraphon::new(w).map_err(err),
        Err(_) => from_py(obj),
    }
}

/// Graphons are given as a kernel dict, e.g. {"kernel": "product"}, or as a
/// square block matrix.
fn any_graphon(obj: &Bound<'_, PyAny>) -> PyResult<Graphon> {
    match obj.extract::<Vec<Vec<f64>>>() {
        Ok(w) => Ok(Graphon::Step(StepGraphon::new(w).map_err(err)?)),
        Err(_) => from_py(obj),
    }
}

fn expand(coeffs: &[AgentCoeffs], n: usize) -> PyResult<Vec<market::AgentCoeffs>> {
    match coeffs.len() {
        1 => Ok(vec![coeffs[0].0.clone(); n]),
        m if m == n => Ok(coeffs.iter().map(|c| c.0.clone()).collect()),
        m => Err(PyValueError::new_err(format!("expected 1 or {n} agent coefficient sets, got {m}"))),
    }
}

/// Step projection of a graphon to n blocks, then G(n, β_n) sampling.
#[pyfunction]
fn sample_interaction_graph(graphon: &Bound<'_, PyAny>, n: usize, beta_n: f64, seed: u64) -> PyResult<InteractionGraph> {
    let g = any_graphon(graphon)?;
    let gn = graphon::project_step(&g, n).map_err(err)?;
    graphon::sample_interaction_graph(&gn, n, beta_n, seed).map(InteractionGraph).map_err(err)
}

/// (value, exact) of the cut distance between two step graphons.
#[pyfunction]
#[pyo3(signature = (a, b, allow_heuristic=false))]
fn cut_norm(a: &Bound<'_, PyAny>, b: &Bound<'_, PyAny>, allow_heuristic: bool) -> PyResult<(f64, bool)> {
    let (a, b) = (step_graphon(a)?, step_graphon(b)?);
    let c = if allow_heuristic { graphon::cut_norm_or_heuristic(&a, &b) } else { graphon::cut_norm(&a, &b).map_err(err)? };
    Ok((c.value, c.exact))
}

#[pyfunction]
#[pyo3(signature = (weights, coeffs, grid, tol=1e-12))]
fn solve_finite(weights: &Weights, coeffs: Vec<AgentCoeffs>, grid: &TimeGrid, tol: f64) -> PyResult<FiniteEquilibrium> {
    let c = expand(&coeffs, weights.0.n())?;
    solve_equilibrium_weights(&weights.0, &c, &grid.0, &SolveOptions { tol, ..Default::default() }).map(FiniteEquilibrium).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (graphon, labels, coeffs, grid, tol=1e-12))]
fn solve_graphon(graphon: &Bound<'_, PyAny>, labels: usize, coeffs: Vec<AgentCoeffs>, grid: &TimeGrid, tol: f64) -> PyResult<GraphonEquilibrium> {
    let g = any_graphon(graphon)?;
    let lg = LabelGrid::new(labels).map_err(err)?;
    let c = expand(&coeffs, labels)?;
    let c = if coeffs.len() == 1 { &c[..1] } else { &c[..] };
    solve_graphon_equilibrium_det(&g, &lg, &grid.0, c, tol).map(GraphonEquilibrium).map_err(err)
}

/// Closed-form indifference capital per agent.
#[pyfunction]
fn indifference_finite(eq: &FiniteEquilibrium, coeffs: Vec<AgentCoeffs>, weights: &Weights, grid: &TimeGrid) -> PyResult<Vec<f64>> {
    let c = expand(&coeffs, eq.0.n)?;
    indifference::indifference_capital_finite(&eq.0, &c, &weights.0, &grid.0).map(|r| r.p).map_err(err)
}

/// Closed-form indifference capital per label.
#[pyfunction]
fn indifference_graphon(eq: &GraphonEquilibrium, graphon: &Bound<'_, PyAny>, coeffs: Vec<AgentCoeffs>, grid: &TimeGrid) -> PyResult<Vec<f64>> {
    let g = any_graphon(graphon)?;
    let m = eq.0.labels.len();
    let lg = LabelGrid::new(m).map_err(err)?;
    let c = expand(&coeffs, m)?;
    let c = if coeffs.len() == 1 { &c[..1] } else { &c[..] };
    indifference::indifference_capital_graphon(&eq.0, &g, &lg, &grid.0, c).map(|r| r.p).map_err(err)
}

/// Monte Carlo bisection for agent i; returns (p, standard error).
#[pyfunction]
#[pyo3(signature = (agent, eq, coeffs, weights, grid, paths, seed, tol=1e-8))]
#[allow(clippy::too_many_arguments)]
fn indifference_bisection(agent: usize, eq: &FiniteEquilibrium, coeffs: Vec<AgentCoeffs>, weights: &Weights, grid: &TimeGrid, paths: usize, seed: u64, tol: f64) -> PyResult<(f64, f64)> {
    let c = expand(&coeffs, eq.0.n)?;
    let r = indifference::indifference_bisection(agent, &eq.0, &c, &weights.0, &grid.0, paths, seed, tol).map_err(err)?;
    Ok((r.p[0], r.diagnostics.std_error.unwrap_or(f64::NAN)))
}

/// Runs a propagation-of-chaos experiment from a config dict and returns the report as a dict.
#[pyfunction]
fn run_chaos(py: Python<'_>, config: &Bound<'_, PyAny>) -> PyResult<PyObject> {
    let cfg: ChaosConfig = from_py(config)?;
    let report = py.allow_threads(|| run_experiment(&cfg)).map_err(err)?;
    let d = to_py(py, &report)?;
    d.bind(py).downcast::<PyDict>()?.set_item("csv", report.to_csv())?;
    Ok(d)
}

#[pymodule]
fn relperf(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<TimeGrid>()?;
    m.add_class::<AgentCoeffs>()?;
    m.add_class::<InteractionGraph>()?;
    m.add_class::<Weights>()?;
    m.add_class::<FiniteEquilibrium>()?;
    m.add_class::<GraphonEquilibrium>()?;
    m.add_function(wrap_pyfunction!(sample_interaction_graph, m)?)?;
    m.add_function(wrap_pyfunction!(cut_norm, m)?)?;
    m.add_function(wrap_pyfunction!(solve_finite, m)?)?;
    m.add_function(wrap_pyfunction!(solve_graphon, m)?)?;
    m.add_function(wrap_pyfunction!(indifference_finite, m)?)?;
    m.add_function(wrap_pyfunction!(indifference_graphon, m)?)?;
    m.add_function(wrap_pyfunction!(indifference_bisection, m)?)?;
    m.add_function(wrap_pyfunction!(run_chaos, m)?)?;
    Ok(())
}
