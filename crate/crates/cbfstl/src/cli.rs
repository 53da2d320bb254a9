//! Scenario files, case-study dynamics, and the command pipeline.
//!
//! A scenario is a JSON file declaring the dynamics (explicit matrices or a
//! named builtin), the state and input sets, named predicates, obstacles,
//! the formula text, the start state, the gain and margin floor for the
//! encoder, and the planner parameters. The pipeline commands share the
//! encode step and emit their artifacts under an output directory:
//!
//! * `encode`: barrier parameters and per-disjunct margins (`encode.json`),
//! * `plan`: `trajectory.csv`, `stats.json`, and barrier-boundary frames,
//! * `simulate`: a feedback rollout (`rollout.csv`, `simulate.json`),
//! * `monitor`: robustness of a trajectory CSV (`monitor.json`).
//!
//! Errors surface as machine-readable JSON and a nonzero exit code.

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use serde_json::json;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::barrier::{make_task_barrier, BarrierError, ConjunctionBarrier, TaskBarrier};
use crate::encoder::{encode_disjunction, Dynamics, EncoderError, EncodingResult};
use crate::formula::{
    collapse_same_operator, horizon, parse, to_conjunctions, AtomicTask, FormulaError,
    ParseError, StlFormula, TaskKind,
};
use crate::geometry::{
    contains, enumerate_vertices, GeometryError, LinearPredicate, Polytope,
};
use crate::invariance::{rollout, ClassKGain, InvarianceError};
use crate::monitor::{robustness, MonitorError, SampledSignal};
use crate::planner::{plan, PlanOutcome, PlannerError, PlannerParams};
use crate::solver::{Clarabel, DenseLdp};

/// Step used by the `simulate` rollout. The barrier controller enforces a
/// derivative condition, so the integration step must be much finer than the
/// planner knot spacing regardless of the scenario's time scale.
const SIM_DT: f64 = 0.01;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("schema error: {reason}")]
    Schema { reason: String },
    #[error("semantic error: {0}")]
    Semantic(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("formula error: {0}")]
    Parse(#[from] ParseError),
    #[error("formula error: {0}")]
    Formula(#[from] FormulaError),
    #[error(transparent)]
    Barrier(#[from] BarrierError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Invariance(#[from] InvarianceError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error(transparent)]
    Monitor(#[from] MonitorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Schema { .. } => "schema",
            CliError::Semantic(_) => "semantic",
            CliError::Io { .. } => "io",
            CliError::Parse(_) | CliError::Formula(_) => "formula",
            CliError::Barrier(_) => "barrier",
            CliError::Encoder(_) => "encoder",
            CliError::Invariance(_) => "invariance",
            CliError::Planner(_) => "planner",
            CliError::Monitor(_) => "monitor",
            CliError::Geometry(_) => "geometry",
        }
    }

    /// Machine-readable error payload for the process boundary.
    pub fn to_json(&self) -> serde_json::Value {
        json!({ "error": { "kind": self.kind(), "message": self.to_string() } })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

// ---------------------------------------------------------------------------
// Schema
// ---------------------------------------------------------------------------

/// Either a full matrix (rows) or the diagonal of one.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum MatrixSpec {
    Full(Vec<Vec<f64>>),
    Diag(Vec<f64>),
}

impl MatrixSpec {
    fn build(&self, field: &str) -> Result<DMatrix<f64>, CliError> {
        match self {
            MatrixSpec::Full(rows) => matrix_from_rows(rows, field),
            MatrixSpec::Diag(d) => {
                Ok(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
            }
        }
    }
}

fn matrix_from_rows(rows: &[Vec<f64>], field: &str) -> Result<DMatrix<f64>, CliError> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(CliError::Schema {
            reason: format!("{field} must be a nonempty rectangular array of rows"),
        });
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// A polytope as either an axis box or rows `a x <= b`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SetSpec {
    #[serde(default)]
    lower: Option<Vec<f64>>,
    #[serde(default)]
    upper: Option<Vec<f64>>,
    #[serde(default, alias = "A")]
    a: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    b: Option<Vec<f64>>,
}

impl SetSpec {
    fn build(&self, field: &str) -> Result<Polytope, CliError> {
        match (&self.lower, &self.upper, &self.a, &self.b) {
            (Some(lo), Some(up), None, None) => {
                Polytope::axis_box(lo, up).map_err(CliError::Geometry)
            }
            (None, None, Some(a), Some(b)) => {
                let a = matrix_from_rows(a, field)?;
                Polytope::new(a, DVector::from_column_slice(b)).map_err(CliError::Geometry)
            }
            _ => Err(CliError::Schema {
                reason: format!("{field} needs either lower/upper or a/b"),
            }),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DynamicsSpec {
    #[serde(default)]
    builtin: Option<String>,
    #[serde(default)]
    args: Option<BTreeMap<String, f64>>,
    #[serde(default, alias = "A")]
    a: Option<Vec<Vec<f64>>>,
    #[serde(default, alias = "B")]
    b: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    p: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredicateSpec {
    #[serde(alias = "D")]
    d: Vec<Vec<f64>>,
    c: Vec<f64>,
}

fn default_time_weight() -> f64 {
    1.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlannerSpec {
    #[serde(alias = "Q")]
    q: MatrixSpec,
    #[serde(alias = "R")]
    r: MatrixSpec,
    delta_max: f64,
    eps_rewire: f64,
    dt: f64,
    n_max: usize,
    #[serde(default)]
    collision_resolution: Option<f64>,
    #[serde(default = "default_time_weight")]
    time_weight: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    /// Free-form notes; ignored by the pipeline.
    #[serde(default)]
    #[allow(dead_code)]
    comment: Option<serde_json::Value>,
    dynamics: DynamicsSpec,
    #[serde(default)]
    state_set: Option<SetSpec>,
    #[serde(default)]
    input_set: Option<SetSpec>,
    predicates: BTreeMap<String, PredicateSpec>,
    #[serde(default)]
    obstacles: Vec<SetSpec>,
    formula: String,
    x0: Vec<f64>,
    kappa_gain: f64,
    r_min: f64,
    planner: PlannerSpec,
    #[serde(default)]
    seed: u64,
}

// ---------------------------------------------------------------------------
// Case-study dynamics
// ---------------------------------------------------------------------------

/// Planar single integrator with a position-dependent velocity drift.
pub fn build_drift_integrator() -> Dynamics {
    let a = DMatrix::from_row_slice(2, 2, &[-0.049, -0.029, -0.071, -0.049]);
    let b = DMatrix::identity(2, 2);
    let p = DVector::zeros(2);
    let x = Polytope::axis_box(&[-10.0, -10.0], &[10.0, 10.0]).unwrap();
    let u = Polytope::axis_box(&[-5.0, -5.0], &[5.0, 5.0]).unwrap();
    Dynamics::new(a, b, p, x, u).unwrap()
}

/// Relative orbital dynamics about a circular reference orbit; the state is
/// position over velocity and the input is a thrust acceleration.
pub fn build_clohessy_wiltshire(n_mean_motion: f64) -> Result<Dynamics, CliError> {
    if !(n_mean_motion > 0.0) {
        return Err(CliError::Semantic(format!(
            "mean motion must be positive, got {n_mean_motion}"
        )));
    }
    let n = n_mean_motion;
    let mut a = DMatrix::zeros(6, 6);
    for i in 0..3 {
        a[(i, i + 3)] = 1.0;
    }
    a[(3, 0)] = 3.0 * n * n;
    a[(3, 4)] = 2.0 * n;
    a[(4, 3)] = -2.0 * n;
    a[(5, 2)] = -n * n;
    let mut b = DMatrix::zeros(6, 3);
    for i in 0..3 {
        b[(i + 3, i)] = 1.0;
    }
    let p = DVector::zeros(6);
    let x = Polytope::axis_box(
        &[-120.0, -120.0, -120.0, -0.5, -0.5, -0.5],
        &[120.0, 120.0, 120.0, 0.5, 0.5, 0.5],
    )
    .unwrap();
    let u = Polytope::axis_box(&[-1.5; 3], &[1.5; 3]).unwrap();
    Ok(Dynamics::new(a, b, p, x, u).unwrap())
}

// ---------------------------------------------------------------------------
// Validated scenario
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Scenario {
    pub dynamics: Dynamics,
    pub predicate_names: Vec<String>,
    pub predicates: Vec<LinearPredicate>,
    pub obstacles: Vec<Polytope>,
    pub formula_text: String,
    pub formula: StlFormula,
    pub x0: DVector<f64>,
    pub kappa_gain: f64,
    pub r_min: f64,
    pub planner: PlannerParams,
    pub seed: u64,
}

pub fn load_scenario(path: &Path) -> Result<Scenario, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let file: ScenarioFile = serde_json::from_str(&text)
        .map_err(|e| CliError::Schema { reason: e.to_string() })?;
    scenario_from_file(file)
}

fn scenario_from_file(file: ScenarioFile) -> Result<Scenario, CliError> {
    let mut dynamics = match (&file.dynamics.builtin, &file.dynamics.a) {
        (Some(name), None) => {
            let args = file.dynamics.args.clone().unwrap_or_default();
            match name.as_str() {
                "drift_integrator" => build_drift_integrator(),
                "clohessy_wiltshire" => {
                    let n = args.get("n_mean_motion").copied().unwrap_or(1.13e-3);
                    build_clohessy_wiltshire(n)?
                }
                other => {
                    return Err(CliError::Schema {
                        reason: format!("unknown builtin dynamics {other:?}"),
                    })
                }
            }
        }
        (None, Some(a_rows)) => {
            let a = matrix_from_rows(a_rows, "dynamics.a")?;
            let b_rows = file.dynamics.b.as_ref().ok_or_else(|| CliError::Schema {
                reason: "dynamics needs b next to a".into(),
            })?;
            let b = matrix_from_rows(b_rows, "dynamics.b")?;
            let n = a.nrows();
            let p = match &file.dynamics.p {
                Some(p) => DVector::from_column_slice(p),
                None => DVector::zeros(n),
            };
            let state = file
                .state_set
                .as_ref()
                .ok_or_else(|| CliError::Schema {
                    reason: "explicit dynamics need a state_set".into(),
                })?
                .build("state_set")?;
            let input = file
                .input_set
                .as_ref()
                .ok_or_else(|| CliError::Schema {
                    reason: "explicit dynamics need an input_set".into(),
                })?
                .build("input_set")?;
            Dynamics::new(a, b, p, state, input).map_err(CliError::Encoder)?
        }
        _ => {
            return Err(CliError::Schema {
                reason: "dynamics needs either builtin or explicit a/b".into(),
            })
        }
    };
    if file.dynamics.builtin.is_some() {
        if let Some(spec) = &file.state_set {
            let state = spec.build("state_set")?;
            dynamics =
                Dynamics::new(dynamics.a, dynamics.b, dynamics.p, state, dynamics.input_set)
                    .map_err(CliError::Encoder)?;
        }
        if let Some(spec) = &file.input_set {
            let input = spec.build("input_set")?;
            dynamics =
                Dynamics::new(dynamics.a, dynamics.b, dynamics.p, dynamics.state_set, input)
                    .map_err(CliError::Encoder)?;
        }
    }
    let n = dynamics.n();

    let mut predicate_names = Vec::with_capacity(file.predicates.len());
    let mut predicates = Vec::with_capacity(file.predicates.len());
    for (name, spec) in &file.predicates {
        let d = matrix_from_rows(&spec.d, &format!("predicates.{name}.d"))?;
        if d.ncols() != n {
            return Err(CliError::Semantic(format!(
                "predicate {name:?} has dimension {}, dynamics have {n}",
                d.ncols()
            )));
        }
        let pred = LinearPredicate::new(d, DVector::from_column_slice(&spec.c))
            .map_err(CliError::Geometry)?;
        predicate_names.push(name.clone());
        predicates.push(pred);
    }

    let name_refs: Vec<&str> = predicate_names.iter().map(String::as_str).collect();
    let formula = parse(&file.formula, &name_refs)?;

    let mut obstacles = Vec::with_capacity(file.obstacles.len());
    for (k, spec) in file.obstacles.iter().enumerate() {
        let ob = spec.build(&format!("obstacles[{k}]"))?;
        if ob.dim() != n {
            return Err(CliError::Semantic(format!(
                "obstacle {k} has dimension {}, dynamics have {n}",
                ob.dim()
            )));
        }
        obstacles.push(ob);
    }

    if file.x0.len() != n {
        return Err(CliError::Semantic(format!(
            "x0 has {} entries, dynamics have {n}",
            file.x0.len()
        )));
    }
    let x0 = DVector::from_column_slice(&file.x0);
    if !contains(&dynamics.state_set, &x0, 1e-9) {
        return Err(CliError::Semantic("x0 lies outside the state set".into()));
    }
    if !(file.kappa_gain > 0.0) {
        return Err(CliError::Semantic(format!(
            "kappa_gain must be positive, got {}",
            file.kappa_gain
        )));
    }
    if !(file.r_min >= 0.0) {
        return Err(CliError::Semantic(format!(
            "r_min must be nonnegative, got {}",
            file.r_min
        )));
    }

    let planner = PlannerParams {
        q: file.planner.q.build("planner.q")?,
        r: file.planner.r.build("planner.r")?,
        delta_max: file.planner.delta_max,
        eps_rewire: file.planner.eps_rewire,
        dt: file.planner.dt,
        n_max: file.planner.n_max,
        collision_resolution: file
            .planner
            .collision_resolution
            .unwrap_or(file.planner.dt / 4.0),
        time_weight: file.planner.time_weight,
        seed: file.seed,
    };

    Ok(Scenario {
        dynamics,
        predicate_names,
        predicates,
        obstacles,
        formula_text: file.formula,
        formula,
        x0,
        kappa_gain: file.kappa_gain,
        r_min: file.r_min,
        planner,
        seed: file.seed,
    })
}

// ---------------------------------------------------------------------------
// Shared encode step
// ---------------------------------------------------------------------------

pub struct Compiled {
    /// Tasks per disjunct after revisit decomposition.
    pub disjunct_tasks: Vec<Vec<AtomicTask>>,
    pub selected: usize,
    pub results: Vec<Result<EncodingResult, EncoderError>>,
    pub barrier: ConjunctionBarrier,
    pub r_star: f64,
}

/// Splits the formula into disjuncts, decomposes revisit tasks, and encodes
/// every disjunct, keeping the one with the best worst-case margin.
pub fn compile(scenario: &Scenario) -> Result<Compiled, CliError> {
    let collapsed = collapse_same_operator(&scenario.formula);
    let mut disjunct_tasks = Vec::new();
    for tasks in to_conjunctions(&collapsed)? {
        let mut flat = Vec::new();
        for task in &tasks {
            if task.kind == TaskKind::AlwaysEventually {
                flat.extend(crate::formula::decompose_gf(task, None)?);
            } else {
                flat.push(task.clone());
            }
        }
        disjunct_tasks.push(flat);
    }
    let mut skeletons: Vec<Vec<TaskBarrier>> = Vec::with_capacity(disjunct_tasks.len());
    for tasks in &disjunct_tasks {
        let mut built = Vec::with_capacity(tasks.len());
        for task in tasks {
            built.push(make_task_barrier(task, &scenario.predicates[task.predicate], None)?);
        }
        skeletons.push(built);
    }
    let (selected, results) = encode_disjunction(
        &skeletons,
        &scenario.dynamics,
        &scenario.x0,
        scenario.kappa_gain,
        scenario.r_min,
        &Clarabel::default(),
    )?;
    let enc = results[selected]
        .as_ref()
        .expect("the selected disjunct is feasible by construction");
    let barrier = enc.barrier(scenario.dynamics.state_set.clone())?;
    let r_star = enc.min_r;
    Ok(Compiled { disjunct_tasks, selected, results, barrier, r_star })
}

fn kind_name(kind: TaskKind) -> &'static str {
    match kind {
        TaskKind::Eventually => "eventually",
        TaskKind::Always => "always",
        TaskKind::EventuallyAlways => "eventually-always",
        TaskKind::AlwaysEventually => "always-eventually",
    }
}

fn encode_report(scenario: &Scenario, compiled: &Compiled) -> serde_json::Value {
    let disjuncts: Vec<serde_json::Value> = compiled
        .results
        .iter()
        .enumerate()
        .map(|(k, res)| match res {
            Ok(enc) => {
                let tasks: Vec<serde_json::Value> = enc
                    .tasks
                    .iter()
                    .zip(&compiled.disjunct_tasks[k])
                    .zip(enc.gamma_bar.iter().zip(&enc.r))
                    .map(|((tb, task), (gb, r))| {
                        let (alpha, beta) = tb.domain();
                        json!({
                            "predicate": scenario.predicate_names[task.predicate],
                            "kind": kind_name(task.kind),
                            "alpha": alpha,
                            "beta": beta,
                            "gamma_bar": gb,
                            "margin": r,
                        })
                    })
                    .collect();
                json!({
                    "feasible": true,
                    "min_robustness": enc.min_r,
                    "objective": enc.objective,
                    "solve_seconds": enc.solve_seconds,
                    "tasks": tasks,
                })
            }
            Err(e) => json!({ "feasible": false, "error": e.to_string() }),
        })
        .collect();
    json!({
        "formula": scenario.formula_text,
        "selected": compiled.selected,
        "r_star": compiled.r_star,
        "disjuncts": disjuncts,
    })
}

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("JSON values serialize");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Writes knots as rows `t, x1..xn, u1..um`; the final row repeats the last
/// held input.
pub fn write_trajectory_csv(
    path: &Path,
    times: &[f64],
    states: &[DVector<f64>],
    inputs: &[DVector<f64>],
) -> Result<(), CliError> {
    let n = states.first().map_or(0, DVector::len);
    let m = inputs.first().map_or(0, DVector::len);
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e),
    })?;
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    header.extend((1..=m).map(|i| format!("u{i}")));
    let io_wrap = |e: csv::Error| CliError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e),
    };
    w.write_record(&header).map_err(io_wrap)?;
    for (k, t) in times.iter().enumerate() {
        let mut rec = vec![fmt17(*t)];
        rec.extend(states[k].iter().map(|&v| fmt17(v)));
        if !inputs.is_empty() {
            let u = &inputs[k.min(inputs.len() - 1)];
            rec.extend(u.iter().map(|&v| fmt17(v)));
        }
        w.write_record(&rec).map_err(io_wrap)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Reads a trajectory CSV back into knots, states, and held inputs.
pub fn read_trajectory_csv(
    path: &Path,
) -> Result<(Vec<f64>, Vec<DVector<f64>>, Vec<DVector<f64>>), CliError> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e),
    })?;
    let headers = rd
        .headers()
        .map_err(|e| CliError::Semantic(format!("bad CSV header: {e}")))?
        .clone();
    if headers.get(0) != Some("t") {
        return Err(CliError::Semantic("first CSV column must be t".into()));
    }
    let n = headers.iter().filter(|h| h.starts_with('x')).count();
    let m = headers.iter().filter(|h| h.starts_with('u')).count();
    if n == 0 {
        return Err(CliError::Semantic("CSV has no state columns".into()));
    }
    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut inputs = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| CliError::Semantic(format!("bad CSV record: {e}")))?;
        let field = |i: usize| -> Result<f64, CliError> {
            rec.get(i)
                .ok_or_else(|| CliError::Semantic(format!("CSV row is missing column {i}")))?
                .trim()
                .parse::<f64>()
                .map_err(|e| CliError::Semantic(format!("bad CSV number: {e}")))
        };
        times.push(field(0)?);
        let mut x = DVector::zeros(n);
        for i in 0..n {
            x[i] = field(1 + i)?;
        }
        states.push(x);
        if m > 0 {
            let mut u = DVector::zeros(m);
            for i in 0..m {
                u[i] = field(1 + n + i)?;
            }
            inputs.push(u);
        }
    }
    if !inputs.is_empty() {
        inputs.pop();
    }
    Ok((times, states, inputs))
}

/// Emits one CSV per plotting frame of the tube and an index of the frames.
/// Frames up to dimension 3 list vertices; higher dimensions list the
/// half-space rows of the slice.
fn write_boundary_frames(
    out_dir: &Path,
    cb: &ConjunctionBarrier,
) -> Result<serde_json::Value, CliError> {
    let beta = cb.beta_max();
    let mut frame_times = cb.switch_times();
    let samples = 24;
    for k in 0..=samples {
        frame_times.push(beta * k as f64 / samples as f64);
    }
    frame_times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    frame_times.dedup_by(|a, b| (*a - *b).abs() <= 1e-9 * a.abs().max(1.0));
    let n = cb.state_set.dim();
    let mut index = Vec::new();
    for (k, &t) in frame_times.iter().enumerate() {
        let slice = cb.set_at(t)?;
        let name = format!("boundary_frame_{k:03}.csv");
        let path = out_dir.join(&name);
        let io_wrap = |e: csv::Error| CliError::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e),
        };
        let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e),
        })?;
        let kind = if n <= 3 {
            let verts = enumerate_vertices(&slice)?;
            let mut header = vec!["t".to_string()];
            header.extend((1..=n).map(|i| format!("x{i}")));
            w.write_record(&header).map_err(io_wrap)?;
            for v in &verts.vertices {
                let mut rec = vec![fmt17(t)];
                rec.extend(v.iter().map(|&c| fmt17(c)));
                w.write_record(&rec).map_err(io_wrap)?;
            }
            "vertices"
        } else {
            let mut header = vec!["t".to_string()];
            header.extend((1..=n).map(|i| format!("a{i}")));
            header.push("b".to_string());
            w.write_record(&header).map_err(io_wrap)?;
            let (a, b) = (slice.a(), slice.b());
            for row in 0..a.nrows() {
                let mut rec = vec![fmt17(t)];
                rec.extend((0..n).map(|j| fmt17(a[(row, j)])));
                rec.push(fmt17(b[row]));
                w.write_record(&rec).map_err(io_wrap)?;
            }
            "halfspaces"
        };
        w.flush().map_err(io_err(&path))?;
        index.push(json!({ "file": name, "t": t, "kind": kind }));
    }
    Ok(serde_json::Value::Array(index))
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum Command {
    Encode,
    Plan,
    Simulate,
    Monitor { traj: Option<PathBuf> },
}

/// Runs one command against a loaded scenario, writing artifacts under
/// `out_dir` and returning the summary that `main` prints.
pub fn run_pipeline(
    scenario: &Scenario,
    command: &Command,
    out_dir: &Path,
) -> Result<serde_json::Value, CliError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let compiled = compile(scenario)?;
    let report = encode_report(scenario, &compiled);
    write_json(&out_dir.join("encode.json"), &report)?;

    match command {
        Command::Encode => Ok(report),
        Command::Plan => {
            let t_horizon = horizon(&scenario.formula);
            let outcome = plan(
                &compiled.barrier,
                &scenario.dynamics,
                &scenario.obstacles,
                &scenario.x0,
                t_horizon,
                &scenario.planner,
            )?;
            let traj_path = out_dir.join("trajectory.csv");
            write_trajectory_csv(
                &traj_path,
                outcome.trajectory.times(),
                outcome.trajectory.states(),
                outcome.trajectory.inputs(),
            )?;
            let stats = stats_report(scenario, &compiled, &outcome, t_horizon);
            write_json(&out_dir.join("stats.json"), &stats)?;
            let frames = write_boundary_frames(out_dir, &compiled.barrier)?;
            write_json(&out_dir.join("boundary_index.json"), &frames)?;
            Ok(stats)
        }
        Command::Simulate => {
            let gain = ClassKGain::new(scenario.kappa_gain)?;
            let t_end = compiled.barrier.beta_max().max(horizon(&scenario.formula));
            let rolled = rollout(
                &scenario.dynamics,
                &compiled.barrier,
                &gain,
                &scenario.x0,
                SIM_DT,
                t_end,
                &DenseLdp,
            )?;
            let stride = (rolled.times.len() / 4000).max(1);
            let mut keep: Vec<usize> = (0..rolled.times.len()).step_by(stride).collect();
            if *keep.last().unwrap() != rolled.times.len() - 1 {
                keep.push(rolled.times.len() - 1);
            }
            let pick_states: Vec<_> = keep.iter().map(|&k| rolled.states[k].clone()).collect();
            let pick_times: Vec<f64> = keep.iter().map(|&k| rolled.times[k]).collect();
            let pick_inputs: Vec<_> = keep
                .iter()
                .map(|&k| rolled.inputs[k.min(rolled.inputs.len() - 1)].clone())
                .collect();
            let traj_path = out_dir.join("rollout.csv");
            write_trajectory_csv(&traj_path, &pick_times, &pick_states, &pick_inputs)?;
            let sig = SampledSignal::new(rolled.times.clone(), rolled.states.clone())?;
            let rho = robustness(
                &scenario.formula,
                &scenario.predicates,
                &sig,
                0.0,
                scenario.planner.dt / 2.0,
            )?;
            let summary = json!({
                "min_barrier": rolled.min_barrier,
                "rho": rho,
                "r_star": compiled.r_star,
                "satisfied": rho >= compiled.r_star - 1e-3,
                "dt": SIM_DT,
                "t_end": t_end,
            });
            write_json(&out_dir.join("simulate.json"), &summary)?;
            Ok(summary)
        }
        Command::Monitor { traj } => {
            let traj_path = traj
                .clone()
                .unwrap_or_else(|| out_dir.join("trajectory.csv"));
            let (times, states, _) = read_trajectory_csv(&traj_path)?;
            if states.first().map_or(0, DVector::len) != scenario.dynamics.n() {
                return Err(CliError::Semantic(format!(
                    "trajectory has {} state columns, dynamics have {}",
                    states.first().map_or(0, DVector::len),
                    scenario.dynamics.n()
                )));
            }
            let sig = SampledSignal::new(times, states)?;
            let dense_dt = scenario.planner.dt / 2.0;
            let rho = robustness(&scenario.formula, &scenario.predicates, &sig, 0.0, dense_dt)?;
            let summary = json!({
                "trajectory": traj_path.display().to_string(),
                "rho": rho,
                "r_star": compiled.r_star,
                "satisfied": rho >= compiled.r_star - 1e-3,
                "dense_dt": dense_dt,
            });
            write_json(&out_dir.join("monitor.json"), &summary)?;
            Ok(summary)
        }
    }
}

/// Planner stats with every wall-clock field under the `timing` key so
/// deterministic-replay comparisons can drop it wholesale.
fn stats_report(
    scenario: &Scenario,
    compiled: &Compiled,
    outcome: &PlanOutcome,
    t_horizon: f64,
) -> serde_json::Value {
    let s = &outcome.stats;
    json!({
        "seed": scenario.seed,
        "selected_disjunct": compiled.selected,
        "r_star": compiled.r_star,
        "t_horizon": t_horizon,
        "iterations": s.iterations,
        "nodes": s.nodes,
        "goal_node": outcome.goal_node,
        "first_iteration": s.first_iteration,
        "first_cost": s.first_cost,
        "best_cost": s.best_cost,
        "rejections": {
            "steer_infeasible": s.steer_infeasible,
            "zero_duration": s.zero_duration,
            "membership": s.membership_rejections,
            "collision": s.collision_rejections,
            "bridge_infeasible": s.bridge_infeasible,
            "bridge_gates": s.bridge_gate_rejections,
        },
        "bridge_attempts": s.bridge_attempts,
        "rewires": s.rewires,
        "cycle_guards": s.cycle_guards,
        "timing": {
            "first_wall_seconds": s.first_wall_seconds,
            "best_wall_seconds": s.best_wall_seconds,
            "total_wall_seconds": s.total_wall_seconds,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use tempfile::tempdir;

    #[test]
    fn drift_integrator_matches_the_cited_matrices() {
        let d = build_drift_integrator();
        assert_eq!(d.a[(0, 0)], -0.049);
        assert_eq!(d.a[(0, 1)], -0.029);
        assert_eq!(d.a[(1, 0)], -0.071);
        assert_eq!(d.a[(1, 1)], -0.049);
        assert_eq!(d.b, DMatrix::identity(2, 2));
        assert_eq!(d.p, DVector::zeros(2));
        let (lo, hi) = d.state_set.bounding_box().unwrap();
        assert_eq!((lo[0], hi[0]), (-10.0, 10.0));
        let (ulo, uhi) = d.input_set.bounding_box().unwrap();
        assert_eq!((ulo[1], uhi[1]), (-5.0, 5.0));
    }

    #[test]
    fn clohessy_wiltshire_matches_the_cited_entries() {
        let n = 1.13e-3;
        let d = build_clohessy_wiltshire(n).unwrap();
        assert_relative_eq!(d.a[(3, 0)], 3.0 * n * n);
        assert_relative_eq!(d.a[(3, 4)], 2.0 * n);
        assert_relative_eq!(d.a[(4, 3)], -2.0 * n);
        assert_relative_eq!(d.a[(5, 2)], -n * n);
        assert_eq!(d.a[(0, 3)], 1.0);
        assert_eq!(d.b[(3, 0)], 1.0);
        assert_eq!(d.b[(0, 0)], 0.0);
        let (lo, hi) = d.state_set.bounding_box().unwrap();
        assert_eq!((lo[0], hi[0]), (-120.0, 120.0));
        assert_eq!((lo[3], hi[3]), (-0.5, 0.5));
        let (ulo, uhi) = d.input_set.bounding_box().unwrap();
        assert_eq!((ulo[2], uhi[2]), (-1.5, 1.5));
        assert!(build_clohessy_wiltshire(0.0).is_err());
    }

    fn demo_scenario_json() -> String {
        r#"{
            "dynamics": { "builtin": "drift_integrator" },
            "predicates": {
                "target": { "d": [[1,0],[-1,0],[0,1],[0,-1]], "c": [-2,4,-2,4] }
            },
            "obstacles": [],
            "formula": "F[2,26] target",
            "x0": [0.0, 0.0],
            "kappa_gain": 0.2,
            "r_min": 0.05,
            "planner": {
                "q": [1.0, 1.0],
                "r": [0.1, 0.1],
                "delta_max": 2.0,
                "eps_rewire": 4.0,
                "dt": 0.5,
                "n_max": 60
            },
            "seed": 11
        }"#
        .to_string()
    }

    #[test]
    fn a_demo_scenario_loads_and_validates() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("demo.json");
        fs::write(&path, demo_scenario_json()).unwrap();
        let sc = load_scenario(&path).unwrap();
        assert_eq!(sc.predicate_names, vec!["target".to_string()]);
        assert_eq!(sc.dynamics.n(), 2);
        assert_eq!(sc.planner.n_max, 60);
        assert_eq!(sc.planner.collision_resolution, 0.125);
        assert_eq!(sc.seed, 11);
    }

    #[test]
    fn missing_fields_are_schema_errors() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("broken.json");
        let broken = demo_scenario_json().replace("\"formula\": \"F[2,26] target\",", "");
        fs::write(&path, broken).unwrap();
        match load_scenario(&path) {
            Err(CliError::Schema { reason }) => assert!(reason.contains("formula")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn start_state_outside_the_state_set_is_semantic() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("outside.json");
        let outside = demo_scenario_json().replace("\"x0\": [0.0, 0.0]", "\"x0\": [40.0, 0.0]");
        fs::write(&path, outside).unwrap();
        match load_scenario(&path) {
            Err(CliError::Semantic(msg)) => assert!(msg.contains("x0")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_predicates_in_the_formula_fail_to_parse() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("unknown.json");
        let bad = demo_scenario_json().replace("F[2,26] target", "F[2,26] nonexistent");
        fs::write(&path, bad).unwrap();
        assert!(matches!(load_scenario(&path), Err(CliError::Parse(_))));
    }

    #[test]
    fn trajectory_csv_round_trips_bitwise() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        let times = vec![0.0, 0.5, 1.0];
        let states = vec![
            DVector::from_column_slice(&[0.1, -0.2]),
            DVector::from_column_slice(&[1.0 / 3.0, 2.0_f64.sqrt()]),
            DVector::from_column_slice(&[-7.25e-9, 4.0]),
        ];
        let inputs = vec![
            DVector::from_column_slice(&[0.5]),
            DVector::from_column_slice(&[-1.0 / 7.0]),
        ];
        write_trajectory_csv(&path, &times, &states, &inputs).unwrap();
        let (t2, x2, u2) = read_trajectory_csv(&path).unwrap();
        assert_eq!(times, t2);
        assert_eq!(states, x2);
        assert_eq!(inputs, u2);
    }

    #[test]
    fn encode_command_reports_the_selected_disjunct() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("demo.json");
        fs::write(&path, demo_scenario_json()).unwrap();
        let sc = load_scenario(&path).unwrap();
        let out = dir.path().join("out");
        let report = run_pipeline(&sc, &Command::Encode, &out).unwrap();
        assert_eq!(report["selected"], 0);
        assert!(report["r_star"].as_f64().unwrap() >= 0.05);
        assert!(out.join("encode.json").exists());
    }
}
