//! One linear program that picks every barrier parameter at once.
//!
//! Decision variables: per task the pair `(gamma_bar_l, r_l)`, one input
//! vector per space-time vertex of every inter-switch slab, one viability
//! witness per task deadline, and one nonemptiness witness per predicate.
//! Row blocks:
//!
//! * parameter sign and margin rows (`gamma_bar >= 0`, `r >= r_min`),
//! * predicate nonemptiness: a witness point deep enough inside the
//!   predicate and inside the state set,
//! * input admissibility for every vertex input,
//! * initial membership of `x0` in every task's tube at `t = 0`,
//! * viability: at each deadline, a witness state satisfies every task still
//!   active just before it,
//! * invariance: at every vertex of `X x [s_j, s_j+1]` some admissible input
//!   makes each active barrier row's derivative beat `-kappa * row`.
//!
//! All rows are affine in the decision variables because the barrier's
//! segment structure is fixed once the switch times are; convexity of the
//! rows in `(x, t)` is what lets vertices certify the whole slab.
//!
//! The objective maximises `sum_l r_l`; a disjunction encodes every disjunct
//! separately and keeps the one whose worst task margin `min_l r_l` is best.

use nalgebra::{DMatrix, DVector};
use std::time::Instant;
use thiserror::Error;

use crate::barrier::{BarrierError, ConjunctionBarrier, TaskBarrier};
use crate::geometry::{contains, enumerate_vertices, GeometryError, Polytope, VertexSet};
use crate::solver::{ConvexProblem, ConvexSolve, Solved, SolverError, SparseRows};

/// Continuous-time affine dynamics `x' = A x + B u + p` over compact state
/// and input sets.
#[derive(Debug, Clone)]
pub struct Dynamics {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub p: DVector<f64>,
    pub state_set: Polytope,
    pub input_set: Polytope,
}

impl Dynamics {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        p: DVector<f64>,
        state_set: Polytope,
        input_set: Polytope,
    ) -> Result<Self, EncoderError> {
        let n = a.nrows();
        let m = b.ncols();
        if a.ncols() != n || b.nrows() != n || p.len() != n {
            return Err(EncoderError::Dimension(format!(
                "A is {}x{}, B is {}x{}, p has {}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols(),
                p.len()
            )));
        }
        if state_set.dim() != n || input_set.dim() != m {
            return Err(EncoderError::Dimension(format!(
                "state set dim {} vs n = {}, input set dim {} vs m = {}",
                state_set.dim(),
                n,
                input_set.dim(),
                m
            )));
        }
        Ok(Self { a, b, p, state_set, input_set })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowBlock {
    Parameter,
    PredicateNonempty,
    Input,
    Initial,
    Viability,
    Invariance,
}

impl std::fmt::Display for RowBlock {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            RowBlock::Parameter => "parameter",
            RowBlock::PredicateNonempty => "predicate-nonempty",
            RowBlock::Input => "input",
            RowBlock::Initial => "initial",
            RowBlock::Viability => "viability",
            RowBlock::Invariance => "invariance",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("initial state lies outside the state set")]
    InitialStateOutside,
    #[error("class-K gain must be positive, got {0}")]
    BadGain(f64),
    #[error("r_min must be positive, got {0}")]
    BadMargin(f64),
    #[error("no tasks to encode")]
    NoTasks,
    #[error("parameter LP infeasible{}", culprit.map(|b| format!(" (relaxing the {b} block restores feasibility)")).unwrap_or_default())]
    Infeasible { culprit: Option<RowBlock> },
    #[error("every disjunct is infeasible: {0:?}")]
    AllInfeasible(Vec<String>),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Barrier(#[from] BarrierError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// One inter-switch slab `[s_lo, s_hi]` with the tasks active on it.
#[derive(Debug, Clone)]
pub struct TimeSlab {
    pub s_lo: f64,
    pub s_hi: f64,
    pub active: Vec<usize>,
}

/// Assembled LP, with enough metadata to diagnose and to rebind solutions.
#[derive(Debug, Clone)]
pub struct LpLayout {
    pub tasks: Vec<TaskBarrier>,
    pub num_vars: usize,
    pub objective: Vec<f64>,
    pub rows: SparseRows,
    pub row_blocks: Vec<RowBlock>,
    pub slabs: Vec<TimeSlab>,
    /// `theta[l] = (gamma_bar column, r column)`.
    pub theta: Vec<(usize, usize)>,
    /// `input_vars[j][q]` = first column of the input at vertex `q` of slab `j`.
    pub input_vars: Vec<Vec<usize>>,
    /// First column of the viability witness for each deadline (task order by
    /// ascending beta).
    pub viability_vars: Vec<usize>,
    /// Task indices sorted by ascending deadline.
    pub beta_order: Vec<usize>,
    /// First column of the nonemptiness witness per task.
    pub witness_vars: Vec<usize>,
    pub state_vertices: VertexSet,
}

/// Builds the parameter LP for one conjunction of tasks.
pub fn build_lp(
    tasks: &[TaskBarrier],
    dynamics: &Dynamics,
    x0: &DVector<f64>,
    kappa: f64,
    r_min: f64,
) -> Result<LpLayout, EncoderError> {
    if tasks.is_empty() {
        return Err(EncoderError::NoTasks);
    }
    if kappa <= 0.0 {
        return Err(EncoderError::BadGain(kappa));
    }
    if r_min <= 0.0 {
        return Err(EncoderError::BadMargin(r_min));
    }
    let n = dynamics.n();
    let m = dynamics.m();
    if x0.len() != n {
        return Err(EncoderError::Dimension(format!(
            "x0 has {} entries, state dimension is {}",
            x0.len(),
            n
        )));
    }
    for tb in tasks {
        if tb.predicate.dim() != n {
            return Err(EncoderError::Dimension(format!(
                "predicate dimension {} vs state dimension {}",
                tb.predicate.dim(),
                n
            )));
        }
    }
    if !contains(&dynamics.state_set, x0, 1e-9) {
        return Err(EncoderError::InitialStateOutside);
    }

    let n_tasks = tasks.len();
    let cb = ConjunctionBarrier::new(tasks.to_vec(), dynamics.state_set.clone())?;
    let switch_times = cb.switch_times();
    let state_vertices = enumerate_vertices(&dynamics.state_set)?;

    // Slabs between consecutive switch times, each with its active set.
    let mut slabs = Vec::new();
    for w in switch_times.windows(2) {
        let (s_lo, s_hi) = (w[0], w[1]);
        if s_hi - s_lo <= 1e-12 {
            continue;
        }
        let active = cb.active_set(s_lo);
        if !active.is_empty() {
            slabs.push(TimeSlab { s_lo, s_hi, active });
        }
    }

    // Column layout: theta pairs, then slab-vertex inputs, then viability
    // witnesses, then nonemptiness witnesses.
    let mut next = 0usize;
    let theta: Vec<(usize, usize)> = (0..n_tasks)
        .map(|_| {
            let cols = (next, next + 1);
            next += 2;
            cols
        })
        .collect();
    let mut input_vars = Vec::with_capacity(slabs.len());
    for _ in &slabs {
        let mut per_vertex = Vec::with_capacity(2 * state_vertices.len());
        for _ in 0..2 * state_vertices.len() {
            per_vertex.push(next);
            next += m;
        }
        input_vars.push(per_vertex);
    }
    let mut beta_order: Vec<usize> = (0..n_tasks).collect();
    beta_order.sort_by(|&a, &b| {
        tasks[a]
            .beta
            .partial_cmp(&tasks[b].beta)
            .unwrap()
            .then(a.cmp(&b))
    });
    let viability_vars: Vec<usize> = beta_order
        .iter()
        .map(|_| {
            let c = next;
            next += n;
            c
        })
        .collect();
    let witness_vars: Vec<usize> = (0..n_tasks)
        .map(|_| {
            let c = next;
            next += n;
            c
        })
        .collect();
    let num_vars = next;

    let mut objective = vec![0.0; num_vars];
    for &(_, r_col) in &theta {
        objective[r_col] = -1.0;
    }

    let mut rows = SparseRows::new();
    let mut row_blocks = Vec::new();
    let push = |rows: &mut SparseRows,
                    blocks: &mut Vec<RowBlock>,
                    block: RowBlock,
                    cols: &[(usize, f64)],
                    rhs: f64| {
        rows.push_row(cols, rhs);
        blocks.push(block);
    };

    // Parameter block.
    for (l, tb) in tasks.iter().enumerate() {
        let (g_col, r_col) = theta[l];
        push(&mut rows, &mut row_blocks, RowBlock::Parameter, &[(g_col, -1.0)], 0.0);
        push(&mut rows, &mut row_blocks, RowBlock::Parameter, &[(r_col, -1.0)], -r_min);
        if tb.alpha == 0.0 {
            push(&mut rows, &mut row_blocks, RowBlock::Parameter, &[(g_col, 1.0)], 0.0);
        }
    }

    // Predicate nonemptiness: D_l w_l + c_l >= r_l 1, w_l in X.
    for (l, tb) in tasks.iter().enumerate() {
        let (_, r_col) = theta[l];
        let w0 = witness_vars[l];
        let d = &tb.predicate.d;
        for k in 0..d.nrows() {
            let mut cols: Vec<(usize, f64)> = (0..n).map(|j| (w0 + j, -d[(k, j)])).collect();
            cols.push((r_col, 1.0));
            push(
                &mut rows,
                &mut row_blocks,
                RowBlock::PredicateNonempty,
                &cols,
                tb.predicate.c[k],
            );
        }
        let ax = dynamics.state_set.a();
        for k in 0..ax.nrows() {
            let cols: Vec<(usize, f64)> = (0..n).map(|j| (w0 + j, ax[(k, j)])).collect();
            push(
                &mut rows,
                &mut row_blocks,
                RowBlock::PredicateNonempty,
                &cols,
                dynamics.state_set.b()[k],
            );
        }
    }

    // Input admissibility for every slab-vertex input.
    let au = dynamics.input_set.a();
    let bu = dynamics.input_set.b();
    for per_vertex in &input_vars {
        for &u0 in per_vertex {
            for k in 0..au.nrows() {
                let cols: Vec<(usize, f64)> = (0..m).map(|j| (u0 + j, au[(k, j)])).collect();
                push(&mut rows, &mut row_blocks, RowBlock::Input, &cols, bu[k]);
            }
        }
    }

    // Initial membership: every task's tube contains x0 at t = 0.
    for (l, tb) in tasks.iter().enumerate() {
        let (g_col, r_col) = theta[l];
        let seg = tb.upsilon(0.0)?;
        let form = tb.matrix_form(seg);
        let hx0 = &form.d * x0 + &form.c;
        for k in 0..hx0.len() {
            // h_k(x0) + g(gamma_bar, r) >= 0   (e * t vanishes at t = 0)
            let cols = [(g_col, -form.g.gamma_bar), (r_col, -form.g.r)];
            push(
                &mut rows,
                &mut row_blocks,
                RowBlock::Initial,
                &cols,
                hx0[k] + form.g.constant,
            );
        }
    }

    // Viability: at each deadline beta_l (ascending), a witness state xi
    // satisfies every task active just after the previous deadline.
    let mut prev_beta = 0.0;
    for (ord, &l) in beta_order.iter().enumerate() {
        let beta_l = tasks[l].beta;
        let xi0 = viability_vars[ord];
        for (lt, tb) in tasks.iter().enumerate() {
            if !(tb.beta > prev_beta) {
                continue;
            }
            let (g_col, r_col) = theta[lt];
            let seg = tb.upsilon(beta_l.min(tb.beta))?;
            let form = tb.matrix_form(seg);
            let e_t_const = form.e.constant * beta_l + form.g.constant;
            let e_t_gamma = form.e.gamma_bar * beta_l + form.g.gamma_bar;
            let e_t_r = form.e.r * beta_l + form.g.r;
            for k in 0..form.d.nrows() {
                let mut cols: Vec<(usize, f64)> =
                    (0..n).map(|j| (xi0 + j, -form.d[(k, j)])).collect();
                cols.push((g_col, -e_t_gamma));
                cols.push((r_col, -e_t_r));
                push(
                    &mut rows,
                    &mut row_blocks,
                    RowBlock::Viability,
                    &cols,
                    form.c[k] + e_t_const,
                );
            }
        }
        let ax = dynamics.state_set.a();
        for k in 0..ax.nrows() {
            let cols: Vec<(usize, f64)> = (0..n).map(|j| (xi0 + j, ax[(k, j)])).collect();
            push(
                &mut rows,
                &mut row_blocks,
                RowBlock::Viability,
                &cols,
                dynamics.state_set.b()[k],
            );
        }
        prev_beta = beta_l;
    }

    // Invariance: at every vertex (eta_x, eta_t) of X x [s_lo, s_hi], the
    // vertex input must give every active row
    //   d_k'(A eta_x + B u + p) + e + kappa (d_k' eta_x + c_k + e eta_t + g) >= 0.
    for (j, slab) in slabs.iter().enumerate() {
        for (q, (vertex, eta_t)) in state_vertices
            .vertices
            .iter()
            .flat_map(|v| [(v, slab.s_lo), (v, slab.s_hi)])
            .enumerate()
        {
            let u0 = input_vars[j][q];
            for &l in &slab.active {
                let tb = &tasks[l];
                let (g_col, r_col) = theta[l];
                let seg = tb.upsilon(slab.s_lo)?;
                let form = tb.matrix_form(seg);
                let d = &form.d;
                let a_eta = &dynamics.a * vertex;
                for k in 0..d.nrows() {
                    let dk = d.row(k);
                    let dk_aeta: f64 = (0..n).map(|i| dk[i] * a_eta[i]).sum();
                    let dk_p: f64 = (0..n).map(|i| dk[i] * dynamics.p[i]).sum();
                    let dk_eta: f64 = (0..n).map(|i| dk[i] * vertex[i]).sum();
                    let constant = dk_aeta
                        + dk_p
                        + form.e.constant
                        + kappa * (dk_eta + form.c[k] + form.e.constant * eta_t + form.g.constant);
                    let coef_gamma = form.e.gamma_bar
                        + kappa * (form.e.gamma_bar * eta_t + form.g.gamma_bar);
                    let coef_r = form.e.r + kappa * (form.e.r * eta_t + form.g.r);
                    let mut cols: Vec<(usize, f64)> = Vec::with_capacity(m + 2);
                    for uj in 0..m {
                        let dk_b: f64 = (0..n).map(|i| dk[i] * dynamics.b[(i, uj)]).sum();
                        if dk_b != 0.0 {
                            cols.push((u0 + uj, -dk_b));
                        }
                    }
                    cols.push((g_col, -coef_gamma));
                    cols.push((r_col, -coef_r));
                    push(&mut rows, &mut row_blocks, RowBlock::Invariance, &cols, constant);
                }
            }
        }
    }

    Ok(LpLayout {
        tasks: tasks.to_vec(),
        num_vars,
        objective,
        rows,
        row_blocks,
        slabs,
        theta,
        input_vars,
        viability_vars,
        beta_order,
        witness_vars,
        state_vertices,
    })
}

/// Solved parameters for one conjunction.
#[derive(Debug, Clone)]
pub struct EncodingResult {
    pub tasks: Vec<TaskBarrier>,
    pub gamma_bar: Vec<f64>,
    pub r: Vec<f64>,
    pub objective: f64,
    pub min_r: f64,
    pub solution: DVector<f64>,
    pub solve_seconds: f64,
}

impl EncodingResult {
    pub fn barrier(&self, state_set: Polytope) -> Result<ConjunctionBarrier, BarrierError> {
        ConjunctionBarrier::new(self.tasks.clone(), state_set)
    }
}

/// Solves an assembled layout, binding the barrier parameters on success.
///
/// On infeasibility each row block except the parameter rows is dropped in
/// turn and the LP re-solved; the first block whose removal restores
/// feasibility is reported as the culprit.
pub fn solve_lp(layout: &LpLayout, solver: &dyn ConvexSolve) -> Result<EncodingResult, EncoderError> {
    let start = Instant::now();
    let solved = solve_filtered(layout, solver, None)?;
    match solved {
        Solved::Optimal { x, objective } => {
            let mut tasks = layout.tasks.clone();
            let mut gamma_bar = Vec::with_capacity(tasks.len());
            let mut r = Vec::with_capacity(tasks.len());
            for (l, tb) in tasks.iter_mut().enumerate() {
                let (g_col, r_col) = layout.theta[l];
                tb.bind(x[g_col], x[r_col]);
                gamma_bar.push(x[g_col]);
                r.push(x[r_col]);
            }
            let min_r = r.iter().cloned().fold(f64::INFINITY, f64::min);
            Ok(EncodingResult {
                tasks,
                gamma_bar,
                r,
                objective,
                min_r,
                solution: x,
                solve_seconds: start.elapsed().as_secs_f64(),
            })
        }
        Solved::Infeasible => {
            for block in [
                RowBlock::Initial,
                RowBlock::Viability,
                RowBlock::Invariance,
                RowBlock::Input,
                RowBlock::PredicateNonempty,
            ] {
                if let Solved::Optimal { .. } = solve_filtered(layout, solver, Some(block))? {
                    return Err(EncoderError::Infeasible { culprit: Some(block) });
                }
            }
            Err(EncoderError::Infeasible { culprit: None })
        }
    }
}

fn solve_filtered(
    layout: &LpLayout,
    solver: &dyn ConvexSolve,
    drop: Option<RowBlock>,
) -> Result<Solved, EncoderError> {
    let mut prob = ConvexProblem::new(layout.num_vars);
    for (col, &c) in layout.objective.iter().enumerate() {
        if c != 0.0 {
            prob.add_linear(col, c);
        }
    }
    // Row-wise copy, skipping the dropped block.
    let mut per_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); layout.rows.num_rows()];
    for &(r, c, v) in layout.rows.entries() {
        per_row[r].push((c, v));
    }
    for (r, cols) in per_row.iter().enumerate() {
        if Some(layout.row_blocks[r]) == drop {
            continue;
        }
        prob.add_ineq_row(cols, layout.rows.rhs()[r]);
    }
    Ok(solver.solve(&prob)?)
}

/// Encodes every disjunct and selects the argmax of `min_l r_l` (ties go to
/// the lowest index). Returns the winning index together with every
/// disjunct's outcome.
#[allow(clippy::type_complexity)]
pub fn encode_disjunction(
    disjuncts: &[Vec<TaskBarrier>],
    dynamics: &Dynamics,
    x0: &DVector<f64>,
    kappa: f64,
    r_min: f64,
    solver: &dyn ConvexSolve,
) -> Result<(usize, Vec<Result<EncodingResult, EncoderError>>), EncoderError> {
    let mut results = Vec::with_capacity(disjuncts.len());
    for tasks in disjuncts {
        let res = build_lp(tasks, dynamics, x0, kappa, r_min)
            .and_then(|layout| solve_lp(&layout, solver));
        results.push(res);
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, res) in results.iter().enumerate() {
        if let Ok(enc) = res {
            if best.map_or(true, |(_, m)| enc.min_r > m) {
                best = Some((i, enc.min_r));
            }
        }
    }
    match best {
        Some((i, _)) => Ok((i, results)),
        None => Err(EncoderError::AllInfeasible(
            results
                .iter()
                .map(|r| r.as_ref().err().map(|e| e.to_string()).unwrap_or_default())
                .collect(),
        )),
    }
}
