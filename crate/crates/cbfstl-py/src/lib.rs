//! Python bindings for the `cbfstl` pipeline.
//!
//! The module mirrors the CLI stages: load a scenario JSON file, compile its
//! formula into time-varying polyhedral sets, then plan, simulate, or score
//! trajectories against the same specification. States and inputs cross the
//! boundary as plain lists of floats so the module has no numpy dependency,
//! while still converting cheaply with `np.asarray`.

use std::path::PathBuf;

use nalgebra::DVector;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use cbfstl::barrier::ConjunctionBarrier;
use cbfstl::cli::{self, CliError, Scenario as CoreScenario};
use cbfstl::formula::horizon;
use cbfstl::geometry::Polytope;
use cbfstl::invariance::{rollout, ClassKGain};
use cbfstl::monitor::{robustness as monitor_robustness, SampledSignal};
use cbfstl::planner::plan as planner_plan;
use cbfstl::solver::DenseLdp;

fn cli_err(e: CliError) -> PyErr {
    match e.kind() {
        "io" => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_vec(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

fn to_states(states: &[DVector<f64>]) -> Vec<Vec<f64>> {
    states.iter().map(to_vec).collect()
}

fn from_states(states: Vec<Vec<f64>>, dim: usize) -> PyResult<Vec<DVector<f64>>> {
    states
        .into_iter()
        .enumerate()
        .map(|(k, x)| {
            if x.len() != dim {
                Err(PyValueError::new_err(format!(
                    "state {k} has {} entries, expected {dim}",
                    x.len()
                )))
            } else {
                Ok(DVector::from_vec(x))
            }
        })
        .collect()
}

fn polytope_rows(p: &Polytope) -> (Vec<Vec<f64>>, Vec<f64>) {
    let a = p.a();
    let rows = (0..a.nrows()).map(|i| a.row(i).iter().copied().collect()).collect();
    (rows, to_vec(p.b()))
}

/// A validated problem instance: linear dynamics, named polyhedral
/// predicates, an STL formula, a start state, and planner settings.
#[pyclass(module = "cbfstl_py")]
pub struct Scenario {
    inner: CoreScenario,
}

#[pymethods]
impl Scenario {
    /// Loads and validates a scenario JSON file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = cli::load_scenario(&path).map_err(cli_err)?;
        Ok(Self { inner })
    }

    /// The formula exactly as written in the scenario file.
    #[getter]
    fn formula(&self) -> String {
        self.inner.formula_text.clone()
    }

    #[getter]
    fn predicate_names(&self) -> Vec<String> {
        self.inner.predicate_names.clone()
    }

    #[getter]
    fn x0(&self) -> Vec<f64> {
        to_vec(&self.inner.x0)
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.inner.dynamics.n()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.dynamics.m()
    }

    #[getter]
    fn kappa_gain(&self) -> f64 {
        self.inner.kappa_gain
    }

    #[getter]
    fn r_min(&self) -> f64 {
        self.inner.r_min
    }

    /// Time by which every obligation in the formula is settled.
    #[getter]
    fn horizon(&self) -> f64 {
        horizon(&self.inner.formula)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    /// Reseeds both the scenario and its planner in one step.
    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
        self.inner.planner.seed = seed;
    }

    fn __repr__(&self) -> String {
        format!(
            "Scenario(formula={:?}, state_dim={}, input_dim={})",
            self.inner.formula_text,
            self.inner.dynamics.n(),
            self.inner.dynamics.m()
        )
    }
}

/// The compiled time-varying polyhedron together with the margins the
/// encoder certified for the selected disjunct.
#[pyclass(module = "cbfstl_py")]
pub struct CompiledSets {
    barrier: ConjunctionBarrier,
    r_star: f64,
    selected: usize,
    margins: Vec<Option<f64>>,
}

#[pymethods]
impl CompiledSets {
    /// Worst per-task margin of the selected disjunct.
    #[getter]
    fn r_star(&self) -> f64 {
        self.r_star
    }

    /// Index of the disjunct the encoder kept.
    #[getter]
    fn selected(&self) -> usize {
        self.selected
    }

    /// Worst margin per disjunct; ``None`` marks an infeasible disjunct.
    #[getter]
    fn margins(&self) -> Vec<Option<f64>> {
        self.margins.clone()
    }

    /// Last deadline among the compiled tasks.
    #[getter]
    fn beta_max(&self) -> f64 {
        self.barrier.beta_max()
    }

    /// Times at which the active task set changes.
    fn switch_times(&self) -> Vec<f64> {
        self.barrier.switch_times()
    }

    /// Halfspace rows ``(D, c)`` of the set at time ``t``: a state ``x`` is
    /// a member when every ``D[i] @ x + c[i] >= 0``.
    fn set_at(&self, t: f64) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
        let p = self.barrier.set_at(t).map_err(value_err)?;
        Ok(polytope_rows(&p))
    }

    /// Whether ``x`` lies in the set at time ``t`` up to ``tol``.
    #[pyo3(signature = (x, t, tol=1e-9))]
    fn contains(&self, x: Vec<f64>, t: f64, tol: f64) -> PyResult<bool> {
        let p = self.barrier.set_at(t).map_err(value_err)?;
        Ok(cbfstl::geometry::contains(&p, &DVector::from_vec(x), tol))
    }

    /// Conjunction barrier value at ``(x, t)``; nonnegative inside the set.
    fn value(&self, x: Vec<f64>, t: f64) -> PyResult<f64> {
        self.barrier.value(&DVector::from_vec(x), t).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "CompiledSets(r_star={:.6}, selected={}, beta_max={})",
            self.r_star,
            self.selected,
            self.barrier.beta_max()
        )
    }
}

/// A planned trajectory with its audit numbers.
#[pyclass(module = "cbfstl_py")]
pub struct PlanResult {
    #[pyo3(get)]
    times: Vec<f64>,
    states: Vec<Vec<f64>>,
    inputs: Vec<Vec<f64>>,
    #[pyo3(get)]
    iterations: usize,
    #[pyo3(get)]
    first_cost: Option<f64>,
    #[pyo3(get)]
    best_cost: Option<f64>,
    /// Monitor robustness of the planned trajectory.
    #[pyo3(get)]
    robustness: f64,
    /// Margin the encoder certified; the monitor score must not fall below it.
    #[pyo3(get)]
    r_star: f64,
}

#[pymethods]
impl PlanResult {
    fn states(&self) -> Vec<Vec<f64>> {
        self.states.clone()
    }

    fn inputs(&self) -> Vec<Vec<f64>> {
        self.inputs.clone()
    }

    /// Writes the trajectory in the same CSV layout the CLI emits.
    fn write_csv(&self, path: PathBuf) -> PyResult<()> {
        let states: Vec<DVector<f64>> =
            self.states.iter().map(|x| DVector::from_vec(x.clone())).collect();
        let inputs: Vec<DVector<f64>> =
            self.inputs.iter().map(|u| DVector::from_vec(u.clone())).collect();
        cli::write_trajectory_csv(&path, &self.times, &states, &inputs).map_err(cli_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "PlanResult(knots={}, robustness={:.6}, best_cost={:?})",
            self.times.len(),
            self.robustness,
            self.best_cost
        )
    }
}

/// A closed-loop rollout under the minimum-norm barrier controller.
#[pyclass(module = "cbfstl_py")]
pub struct RolloutSummary {
    #[pyo3(get)]
    times: Vec<f64>,
    states: Vec<Vec<f64>>,
    inputs: Vec<Vec<f64>>,
    /// Worst conjunction barrier value along the rollout.
    #[pyo3(get)]
    min_barrier: f64,
    /// Monitor robustness of the rollout.
    #[pyo3(get)]
    robustness: f64,
    #[pyo3(get)]
    r_star: f64,
}

#[pymethods]
impl RolloutSummary {
    fn states(&self) -> Vec<Vec<f64>> {
        self.states.clone()
    }

    fn inputs(&self) -> Vec<Vec<f64>> {
        self.inputs.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "RolloutSummary(steps={}, min_barrier={:.3e}, robustness={:.6})",
            self.times.len(),
            self.min_barrier,
            self.robustness
        )
    }
}

/// Loads and validates a scenario JSON file.
#[pyfunction]
fn load_scenario(path: PathBuf) -> PyResult<Scenario> {
    Scenario::load(path)
}

/// Compiles the scenario formula into forward-invariant time-varying sets.
#[pyfunction]
fn compile(scenario: &Scenario) -> PyResult<CompiledSets> {
    let compiled = cli::compile(&scenario.inner).map_err(cli_err)?;
    let margins = compiled.results.iter().map(|r| r.as_ref().ok().map(|e| e.min_r)).collect();
    Ok(CompiledSets {
        barrier: compiled.barrier,
        r_star: compiled.r_star,
        selected: compiled.selected,
        margins,
    })
}

/// Compiles the scenario and grows the time-parameterised tree, returning
/// the cheapest trajectory that reaches the formula horizon.
#[pyfunction]
#[pyo3(signature = (scenario, seed=None, iters=None))]
fn plan(scenario: &Scenario, seed: Option<u64>, iters: Option<usize>) -> PyResult<PlanResult> {
    let mut sc = scenario.inner.clone();
    if let Some(seed) = seed {
        sc.seed = seed;
        sc.planner.seed = seed;
    }
    if let Some(iters) = iters {
        sc.planner.n_max = iters;
    }
    let compiled = cli::compile(&sc).map_err(cli_err)?;
    let t_horizon = horizon(&sc.formula);
    let outcome = planner_plan(
        &compiled.barrier,
        &sc.dynamics,
        &sc.obstacles,
        &sc.x0,
        t_horizon,
        &sc.planner,
    )
    .map_err(value_err)?;
    let sig = SampledSignal::new(
        outcome.trajectory.times().to_vec(),
        outcome.trajectory.states().to_vec(),
    )
    .map_err(value_err)?;
    let rho = monitor_robustness(&sc.formula, &sc.predicates, &sig, 0.0, sc.planner.dt / 2.0)
        .map_err(value_err)?;
    Ok(PlanResult {
        times: outcome.trajectory.times().to_vec(),
        states: to_states(outcome.trajectory.states()),
        inputs: to_states(outcome.trajectory.inputs()),
        iterations: outcome.stats.iterations,
        first_cost: outcome.stats.first_cost,
        best_cost: outcome.stats.best_cost,
        robustness: rho,
        r_star: compiled.r_star,
    })
}

/// Compiles the scenario and simulates the barrier controller from the
/// start state to the formula horizon with a zero-order hold of ``dt``.
#[pyfunction]
#[pyo3(signature = (scenario, dt=0.01))]
fn simulate(scenario: &Scenario, dt: f64) -> PyResult<RolloutSummary> {
    let sc = &scenario.inner;
    let compiled = cli::compile(sc).map_err(cli_err)?;
    let gain = ClassKGain::new(sc.kappa_gain).map_err(value_err)?;
    let t_end = compiled.barrier.beta_max().max(horizon(&sc.formula));
    let rolled = rollout(&sc.dynamics, &compiled.barrier, &gain, &sc.x0, dt, t_end, &DenseLdp)
        .map_err(value_err)?;
    let sig = SampledSignal::new(rolled.times.clone(), rolled.states.clone()).map_err(value_err)?;
    let rho = monitor_robustness(&sc.formula, &sc.predicates, &sig, 0.0, sc.planner.dt / 2.0)
        .map_err(value_err)?;
    Ok(RolloutSummary {
        times: rolled.times,
        states: to_states(&rolled.states),
        inputs: to_states(&rolled.inputs),
        min_barrier: rolled.min_barrier,
        robustness: rho,
        r_star: compiled.r_star,
    })
}

/// Robustness of a piecewise-linear signal against the scenario formula.
///
/// ``times`` must be strictly increasing and cover the formula horizon;
/// ``states`` holds one state per knot. ``dense_dt`` controls the window
/// sampling step and defaults to half the scenario planner grid.
#[pyfunction]
#[pyo3(signature = (scenario, times, states, t0=0.0, dense_dt=None))]
fn robustness(
    scenario: &Scenario,
    times: Vec<f64>,
    states: Vec<Vec<f64>>,
    t0: f64,
    dense_dt: Option<f64>,
) -> PyResult<f64> {
    let sc = &scenario.inner;
    let sig = SampledSignal::new(times, from_states(states, sc.dynamics.n())?)
        .map_err(value_err)?;
    let dd = dense_dt.unwrap_or(sc.planner.dt / 2.0);
    monitor_robustness(&sc.formula, &sc.predicates, &sig, t0, dd).map_err(value_err)
}

#[pymodule]
fn cbfstl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Scenario>()?;
    m.add_class::<CompiledSets>()?;
    m.add_class::<PlanResult>()?;
    m.add_class::<RolloutSummary>()?;
    m.add_function(wrap_pyfunction!(load_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(compile, m)?)?;
    m.add_function(wrap_pyfunction!(plan, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(robustness, m)?)?;
    Ok(())
}
