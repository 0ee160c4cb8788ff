//! Python bindings. States are `(x, y, move)` tuples with `move` one of
//! `"s"`, `"d"`, `"r"`; vectors and matrices are plain lists.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use trackbench::approx::{self, FeatureMatrix, FittedViOptions, LeastSquaresReport, LsqrOptions};
use trackbench::codec::{self, CopulaConfig};
use trackbench::dynamics::{Coord, Move};
use trackbench::mdp::{self, BenchmarkSpec, BoundaryRule, State};
use trackbench::solve::{self, Retain};

type PyState = (i32, i32, String);

fn err(e: trackbench::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_state((x, y, m): PyState) -> PyResult<State> {
    let mut chars = m.chars();
    let prev = match (chars.next(), chars.next()) {
        (Some(c), None) => Move::from_symbol(c),
        _ => None,
    }
    .ok_or_else(|| PyValueError::new_err(format!("unknown move {m:?}")))?;
    Ok(State::new(x, y, prev))
}

fn from_state(s: &State) -> PyState {
    (s.offset.x, s.offset.y, s.prev.symbol().to_string())
}

fn features(rows: Vec<Vec<f64>>) -> PyResult<FeatureMatrix> {
    FeatureMatrix::from_rows(&rows).map_err(err)
}

fn report<'py>(py: Python<'py>, r: &LeastSquaresReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("iterations", r.iterations)?;
    d.set_item("residual", r.residual)?;
    d.set_item("converged", r.converged)?;
    d.set_item("stop", format!("{:?}", r.stop))?;
    Ok(d)
}

#[pyclass(frozen)]
struct Benchmark {
    inner: mdp::Benchmark,
}

#[pymethods]
impl Benchmark {
    #[new]
    #[pyo3(signature = (radius, p, horizon, boundary = "unbounded"))]
    fn new(radius: u32, p: f64, horizon: usize, boundary: &str) -> PyResult<Self> {
        let rule: BoundaryRule = boundary.parse().map_err(err)?;
        let spec = BenchmarkSpec::new(radius, p, horizon).map_err(err)?.with_boundary(rule);
        Ok(Self {
            inner: mdp::Benchmark::new(spec).map_err(err)?,
        })
    }

    #[getter]
    fn radius(&self) -> u32 {
        self.inner.spec().radius
    }

    #[getter]
    fn p(&self) -> f64 {
        self.inner.spec().p.value()
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon()
    }

    #[getter]
    fn boundary(&self) -> String {
        self.inner.boundary().to_string()
    }

    #[getter]
    fn num_states(&self) -> usize {
        self.inner.spec().num_states()
    }

    fn controls(&self) -> Vec<(i32, i32)> {
        self.inner.controls().iter().map(|c| (c.x, c.y)).collect()
    }

    /// Initial states in lexicographic order.
    fn states(&self) -> Vec<PyState> {
        self.inner.states().iter().map(from_state).collect()
    }

    fn stage_cost(&self, state: PyState) -> PyResult<f64> {
        Ok(self.inner.stage_cost(&to_state(state)?))
    }

    /// Successors of `state` under `control` as `(state, probability)`.
    fn transition(&self, state: PyState, control: (i32, i32)) -> PyResult<Vec<(PyState, f64)>> {
        let next = self
            .inner
            .transition(&to_state(state)?, Coord::new(control.0, control.1))
            .map_err(err)?;
        Ok(next.iter().map(|(s, p)| (from_state(s), *p)).collect())
    }

    fn __repr__(&self) -> String {
        let s = self.inner.spec();
        format!(
            "Benchmark(radius={}, p={}, horizon={}, boundary={:?})",
            s.radius,
            s.p.value(),
            s.horizon,
            s.boundary.to_string()
        )
    }
}

#[pyclass(frozen)]
struct Policy {
    inner: solve::Policy,
}

#[pymethods]
impl Policy {
    #[getter]
    fn stationary(&self) -> bool {
        self.inner.is_stationary()
    }

    /// Control at period `k`, or `None` outside the tabulated lattice.
    fn control(&self, k: usize, state: PyState) -> PyResult<Option<(i32, i32)>> {
        Ok(self.inner.control(k, &to_state(state)?).map(|c| (c.x, c.y)))
    }
}

/// Optimal initial costs over `D x T` and the optimal policy.
#[pyfunction]
fn dp_solve(bench: &Benchmark) -> (Vec<f64>, Policy) {
    let (values, policy) = solve::dp_solve(&bench.inner, Retain::Initial);
    (values.initial().to_vec(), Policy { inner: policy })
}

#[pyfunction]
fn greedy_policy(bench: &Benchmark) -> Policy {
    Policy {
        inner: solve::greedy_policy(&bench.inner),
    }
}

/// Expected total cost of `policy` from every initial state.
#[pyfunction]
fn policy_evaluation(bench: &Benchmark, policy: &Policy) -> PyResult<Vec<f64>> {
    let v = solve::policy_evaluation(&bench.inner, &policy.inner, Retain::Initial).map_err(err)?;
    Ok(v.initial().to_vec())
}

#[pyfunction]
fn expected_cost(bench: &Benchmark, policy: &Policy, state: PyState) -> PyResult<f64> {
    solve::expected_cost_forward(&bench.inner, &policy.inner, to_state(state)?).map_err(err)
}

/// `(mean, standard error)` of the total cost over seeded rollouts.
#[pyfunction]
fn monte_carlo_cost(bench: &Benchmark, policy: &Policy, state: PyState, trials: usize, seed: u64) -> PyResult<(f64, f64)> {
    let e = solve::monte_carlo_cost(&bench.inner, &policy.inner, to_state(state)?, trials, seed).map_err(err)?;
    Ok((e.mean, e.stderr))
}

#[pyfunction]
#[pyo3(signature = (bench, alpha, tol = 1e-12, max_iter = 1_000_000))]
fn discounted_value_iteration(bench: &Benchmark, alpha: f64, tol: f64, max_iter: usize) -> PyResult<(Vec<f64>, Policy)> {
    let s = solve::discounted_value_iteration(&bench.inner, alpha, tol, max_iter).map_err(err)?;
    Ok((s.values, Policy { inner: s.policy }))
}

/// Analytic discounted values on the optimal and greedy 3-cycles.
#[pyfunction]
fn closed_form_cycle_values<'py>(py: Python<'py>, p: f64, alpha: f64) -> PyResult<Bound<'py, PyDict>> {
    let c = solve::closed_form_cycle_values(p, alpha).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("optimal", c.optimal.to_vec())?;
    d.set_item("greedy", c.greedy.to_vec())?;
    d.set_item("ratio", c.ratio)?;
    Ok(d)
}

#[pyfunction]
fn classify_initial_states<'py>(py: Python<'py>, bench: &Benchmark) -> PyResult<Bound<'py, PyDict>> {
    let c = solve::classify_initial_states(&bench.inner).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("states", c.states.iter().map(from_state).collect::<Vec<_>>())?;
    d.set_item("optimal", &c.optimal)?;
    d.set_item("greedy", &c.greedy)?;
    d.set_item("greedy_suboptimal", &c.greedy_suboptimal)?;
    d.set_item("suboptimal_count", c.suboptimal_count())?;
    Ok(d)
}

/// Minimum-norm least-squares solution of `matrix x = rhs` by LSQR.
#[pyfunction]
#[pyo3(signature = (matrix, rhs, tol = 1e-6, max_iter = None))]
fn lsqr<'py>(
    py: Python<'py>,
    matrix: Vec<Vec<f64>>,
    rhs: Vec<f64>,
    tol: f64,
    max_iter: Option<usize>,
) -> PyResult<(Vec<f64>, Bound<'py, PyDict>)> {
    let a = features(matrix)?;
    let opts = LsqrOptions::new(tol, max_iter.unwrap_or(50 * a.dim()));
    let (x, r) = approx::fit_values(&a, &rhs, &opts).map_err(err)?;
    Ok((x, report(py, &r)?))
}

/// Fitted value iteration on a clamp benchmark; row `i` of `features`
/// represents state `i`. Returns the policy and one report per period.
#[pyfunction]
#[pyo3(signature = (bench, features, tol = 1e-6, strict = false))]
fn fitted_value_iteration<'py>(
    py: Python<'py>,
    bench: &Benchmark,
    features: Vec<Vec<f64>>,
    tol: f64,
    strict: bool,
) -> PyResult<(Policy, Vec<Bound<'py, PyDict>>)> {
    let f = self::features(features)?;
    let mut opts = FittedViOptions::new(LsqrOptions::for_columns(f.dim()));
    opts.lsqr.tol = tol;
    opts.strict = strict;
    let fit = approx::fitted_value_iteration(&bench.inner, &f, &opts).map_err(err)?;
    let reports = fit.reports.iter().map(|r| report(py, r)).collect::<PyResult<_>>()?;
    Ok((Policy { inner: fit.policy }, reports))
}

/// Row-major `side x side` 1/f image with values in `[0, 1]`.
#[pyfunction]
fn synthesize_image(seed: u64, side: usize) -> Vec<f64> {
    codec::synthesize_image(seed, side).pixels
}

#[pyclass(frozen)]
struct GaborDictionary {
    inner: codec::GaborDictionary,
}

#[pymethods]
impl GaborDictionary {
    /// `factor * side^2` atoms for `side x side` patches.
    #[staticmethod]
    #[pyo3(signature = (seed, side, factor, rho = 0.9))]
    fn sample(seed: u64, side: usize, factor: usize, rho: f64) -> PyResult<Self> {
        let copula = CopulaConfig {
            rho,
            ..CopulaConfig::default()
        };
        Ok(Self {
            inner: codec::GaborDictionary::sample(seed, side, factor, &copula).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: codec::GaborDictionary::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn side(&self) -> usize {
        self.inner.side()
    }

    #[getter]
    fn atoms(&self) -> usize {
        self.inner.atoms()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    /// `(code, residual norm)` of a row-major patch.
    #[pyo3(signature = (patch, tol = 1e-10, max_iter = None))]
    fn encode(&self, patch: Vec<f64>, tol: f64, max_iter: Option<usize>) -> PyResult<(Vec<f64>, f64)> {
        let cap = max_iter.unwrap_or(50 * self.inner.atoms());
        let c = codec::encode(&self.inner, &patch, tol, cap).map_err(err)?;
        Ok((c.coefficients, c.residual_norm))
    }

    fn decode(&self, code: Vec<f64>) -> PyResult<Vec<f64>> {
        codec::decode(&self.inner, &code).map_err(err)
    }
}

#[pymodule]
#[pyo3(name = "trackbench")]
fn trackbench_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Benchmark>()?;
    m.add_class::<Policy>()?;
    m.add_class::<GaborDictionary>()?;
    m.add_function(wrap_pyfunction!(dp_solve, m)?)?;
    m.add_function(wrap_pyfunction!(greedy_policy, m)?)?;
    m.add_function(wrap_pyfunction!(policy_evaluation, m)?)?;
    m.add_function(wrap_pyfunction!(expected_cost, m)?)?;
    m.add_function(wrap_pyfunction!(monte_carlo_cost, m)?)?;
    m.add_function(wrap_pyfunction!(discounted_value_iteration, m)?)?;
    m.add_function(wrap_pyfunction!(closed_form_cycle_values, m)?)?;
    m.add_function(wrap_pyfunction!(classify_initial_states, m)?)?;
    m.add_function(wrap_pyfunction!(lsqr, m)?)?;
    m.add_function(wrap_pyfunction!(fitted_value_iteration, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize_image, m)?)?;
    Ok(())
}
