//! Closed-loop certification: the minimum-norm controller that keeps every
//! task barrier nonnegative, and rollouts that exercise it.
//!
//! At state `x` and time `t` each active barrier row demands
//!
//! ```text
//! d_k' (A x + B u + p) + e  >=  -kappa (d_k' x + c_k + e t + g)
//! ```
//!
//! which is one linear inequality in `u`. Together with the input polytope
//! this is a small QP solved at every control step; the encoder's vertex
//! certificate guarantees it stays feasible along the whole horizon.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::barrier::{BarrierError, ConjunctionBarrier};
use crate::encoder::Dynamics;
use crate::solver::{ConvexProblem, ConvexSolve, MinNormQp, Solved, SolverError};

#[derive(Debug, Error)]
pub enum InvarianceError {
    #[error("class-K gain must be positive, got {0}")]
    BadGain(f64),
    #[error("step size must be positive, got {0}")]
    BadStep(f64),
    #[error("control QP infeasible at t = {t}")]
    QpInfeasible { t: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Barrier(#[from] BarrierError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Linear class-K gain `kappa * s`.
#[derive(Debug, Clone, Copy)]
pub struct ClassKGain {
    kappa: f64,
}

impl ClassKGain {
    pub fn new(kappa: f64) -> Result<Self, InvarianceError> {
        if !(kappa > 0.0) || !kappa.is_finite() {
            return Err(InvarianceError::BadGain(kappa));
        }
        Ok(Self { kappa })
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn eval(&self, s: f64) -> f64 {
        self.kappa * s
    }
}

/// Zero-order-hold discretisation `x+ = Ad x + Bd u + pd`.
#[derive(Debug, Clone)]
pub struct ZohModel {
    pub ad: DMatrix<f64>,
    pub bd: DMatrix<f64>,
    pub pd: DVector<f64>,
    pub dt: f64,
}

impl ZohModel {
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.ad * x + &self.bd * u + &self.pd
    }
}

/// Exact discretisation via the exponential of the augmented matrix
/// `[[A, B, p], [0, 0, 0]]`.
pub fn discretize(dynamics: &Dynamics, dt: f64) -> Result<ZohModel, InvarianceError> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(InvarianceError::BadStep(dt));
    }
    let n = dynamics.n();
    let m = dynamics.m();
    let k = n + m + 1;
    let mut aug = DMatrix::zeros(k, k);
    aug.view_mut((0, 0), (n, n)).copy_from(&dynamics.a);
    aug.view_mut((0, n), (n, m)).copy_from(&dynamics.b);
    aug.view_mut((0, n + m), (n, 1)).copy_from(&dynamics.p);
    let e = (aug * dt).exp();
    Ok(ZohModel {
        ad: e.view((0, 0), (n, n)).into(),
        bd: e.view((0, n), (n, m)).into(),
        pd: e.view((0, n + m), (n, 1)).column(0).into(),
        dt,
    })
}

/// Precomputed per-task row data for fast condition assembly.
struct TaskRows {
    neg_db: DMatrix<f64>,
    da: DMatrix<f64>,
    dp: DVector<f64>,
    d: DMatrix<f64>,
    c: DVector<f64>,
    /// `(e, g)` per segment, index 0 holding segment 1.
    seg: [(f64, f64); 2],
    alpha: f64,
    beta: f64,
}

impl TaskRows {
    fn segment(&self, t: f64) -> (f64, f64) {
        if t < self.alpha {
            self.seg[0]
        } else {
            self.seg[1]
        }
    }
}

fn task_rows(cb: &ConjunctionBarrier) -> Result<Vec<TaskRows>, InvarianceError> {
    let mut out = Vec::with_capacity(cb.tasks.len());
    for tb in &cb.tasks {
        let d = tb.predicate.d.clone();
        out.push(TaskRows {
            neg_db: DMatrix::zeros(0, 0),
            da: DMatrix::zeros(0, 0),
            dp: DVector::zeros(0),
            d,
            c: tb.predicate.c.clone(),
            seg: [tb.segment_values(1)?, tb.segment_values(2)?],
            alpha: tb.alpha,
            beta: tb.beta,
        });
    }
    Ok(out)
}

fn bind_dynamics(rows: &mut [TaskRows], dynamics: &Dynamics) -> Result<(), InvarianceError> {
    for tr in rows.iter_mut() {
        if tr.d.ncols() != dynamics.n() {
            return Err(InvarianceError::Dimension(format!(
                "predicate dimension {} vs state dimension {}",
                tr.d.ncols(),
                dynamics.n()
            )));
        }
        tr.neg_db = -(&tr.d * &dynamics.b);
        tr.da = &tr.d * &dynamics.a;
        tr.dp = &tr.d * &dynamics.p;
    }
    Ok(())
}

/// `(G, h)` of the control constraint `G u <= h` at `(x, t)`: one row per
/// active barrier row plus the input polytope, h evaluated at the state.
fn condition_rows(
    rows: &[TaskRows],
    dynamics: &Dynamics,
    kappa: f64,
    x: &DVector<f64>,
    t: f64,
) -> (DMatrix<f64>, DVector<f64>) {
    let m = dynamics.m();
    let active: Vec<&TaskRows> = rows.iter().filter(|tr| tr.beta > t).collect();
    let n_task: usize = active.iter().map(|tr| tr.d.nrows()).sum();
    let au = dynamics.input_set.a();
    let total = n_task + au.nrows();
    let mut g = DMatrix::zeros(total, m);
    let mut h = DVector::zeros(total);
    let mut at = 0;
    for tr in active {
        let (e, gg) = tr.segment(t);
        let gamma = e * t + gg;
        let k = tr.d.nrows();
        g.view_mut((at, 0), (k, m)).copy_from(&tr.neg_db);
        let wa = &tr.da * x;
        let wd = &tr.d * x;
        for i in 0..k {
            h[at + i] = wa[i] + tr.dp[i] + e + kappa * (wd[i] + tr.c[i] + gamma);
        }
        at += k;
    }
    g.view_mut((at, 0), (au.nrows(), m)).copy_from(au);
    h.rows_mut(at, au.nrows())
        .copy_from(dynamics.input_set.b());
    (g, h)
}

/// Minimum-norm control satisfying every active barrier row at `(x, t)`.
pub fn cbf_qp_control(
    dynamics: &Dynamics,
    cb: &ConjunctionBarrier,
    gain: &ClassKGain,
    x: &DVector<f64>,
    t: f64,
    qp: &dyn MinNormQp,
) -> Result<DVector<f64>, InvarianceError> {
    let mut rows = task_rows(cb)?;
    bind_dynamics(&mut rows, dynamics)?;
    let (g, h) = condition_rows(&rows, dynamics, gain.kappa(), x, t);
    qp.min_norm(&g, &h)
        .ok_or(InvarianceError::QpInfeasible { t })
}

/// Best achievable margin `max_{u in U} min_k row_k(u)` at `(x, t)`.
///
/// Nonnegative when some admissible input satisfies the barrier condition;
/// `+inf` when no task is active.
pub fn check_lie_condition(
    dynamics: &Dynamics,
    cb: &ConjunctionBarrier,
    gain: &ClassKGain,
    x: &DVector<f64>,
    t: f64,
    solver: &dyn ConvexSolve,
) -> Result<f64, InvarianceError> {
    let mut rows = task_rows(cb)?;
    bind_dynamics(&mut rows, dynamics)?;
    if !rows.iter().any(|tr| tr.beta > t) {
        return Ok(f64::INFINITY);
    }
    let (g, h) = condition_rows(&rows, dynamics, gain.kappa(), x, t);
    let m = dynamics.m();
    let n_input = dynamics.input_set.a().nrows();
    let n_task = g.nrows() - n_input;
    // Variables (u, margin): maximise the margin under G u + margin <= h for
    // the task rows, input rows unchanged.
    let mut prob = ConvexProblem::new(m + 1);
    prob.add_linear(m, -1.0);
    for i in 0..g.nrows() {
        let mut cols: Vec<(usize, f64)> = (0..m).map(|j| (j, g[(i, j)])).collect();
        if i < n_task {
            cols.push((m, 1.0));
        }
        prob.add_ineq_row(&cols, h[i]);
    }
    prob.add_ineq_row(&[(m, 1.0)], 1e9);
    match solver.solve(&prob)? {
        Solved::Optimal { x, .. } => Ok(x[m]),
        Solved::Infeasible => Ok(f64::NEG_INFINITY),
    }
}

/// Warm-started active-set solver for the per-step minimum-norm control QP.
///
/// Consecutive rollout steps almost always share an optimal active set, so
/// each step starts from the previous set and runs the classical primal
/// active-set iteration: solve the equality-constrained projection, drop a
/// row whose multiplier has the wrong sign, add the most violated row. A
/// returned control is always KKT-verified, so the fast path never changes
/// the computed control law; degenerate cases fall back to the full solver.
struct WarmActiveSet {
    rows: Vec<usize>,
    /// `m x k` transpose of the active rows of `G`.
    gact_t: DMatrix<f64>,
    /// Inverse of `G_A G_A^T`.
    minv: DMatrix<f64>,
    /// Scratch for the primal feasibility product `G u`.
    gu: DVector<f64>,
}

impl WarmActiveSet {
    const DUAL_TOL: f64 = 1e-10;
    const PRIMAL_TOL: f64 = 1e-9;

    fn empty() -> Self {
        WarmActiveSet {
            rows: Vec::new(),
            gact_t: DMatrix::zeros(0, 0),
            minv: DMatrix::zeros(0, 0),
            gu: DVector::zeros(0),
        }
    }

    fn clear(&mut self) {
        self.rows.clear();
    }

    /// Recomputes the cached factorisation from `self.rows`; `false` when the
    /// selected rows are (numerically) dependent.
    fn rebuild(&mut self, g: &DMatrix<f64>) -> bool {
        let (k, m) = (self.rows.len(), g.ncols());
        let mut ga = DMatrix::zeros(k, m);
        for (r, &row) in self.rows.iter().enumerate() {
            ga.row_mut(r).copy_from(&g.row(row));
        }
        let mm = &ga * ga.transpose();
        let scale = mm.diagonal().amax().max(1e-300);
        match mm.clone().try_inverse() {
            Some(inv) => {
                let residual = (&mm * &inv - DMatrix::identity(k, k)).abs().max();
                if residual > 1e-8 * scale.max(1.0) {
                    return false;
                }
                self.gact_t = ga.transpose();
                self.minv = inv;
                true
            }
            None => false,
        }
    }

    /// Exact optimum of `min ||u|| s.t. G u <= h`, or `None` when the
    /// iteration degenerates and the full solver should arbitrate.
    fn try_step(&mut self, g: &DMatrix<f64>, h: &DVector<f64>) -> Option<DVector<f64>> {
        let m = g.ncols();
        if h.iter().all(|&v| v >= 0.0) {
            return Some(DVector::zeros(m));
        }
        if !self.rows.is_empty() && !self.rebuild(g) {
            self.rows.clear();
        }
        for _ in 0..4 * (h.len() + 1) {
            let u = if self.rows.is_empty() {
                DVector::zeros(m)
            } else {
                let ha = DVector::from_fn(self.rows.len(), |i, _| h[self.rows[i]]);
                let w = &self.minv * &ha;
                if let Some(worst) = (0..w.len()).max_by(|&a, &b| w[a].total_cmp(&w[b])) {
                    if w[worst] > Self::DUAL_TOL {
                        self.rows.swap_remove(worst);
                        if !self.rows.is_empty() && !self.rebuild(g) {
                            return None;
                        }
                        continue;
                    }
                }
                &self.gact_t * &w
            };
            if self.gu.len() != g.nrows() {
                self.gu = DVector::zeros(g.nrows());
            }
            self.gu.gemv(1.0, g, &u, 0.0);
            let mut add = None;
            let mut worst_violation = 0.0;
            for i in 0..h.len() {
                let violation = self.gu[i] - h[i] - Self::PRIMAL_TOL * (1.0 + h[i].abs());
                if violation > worst_violation && !self.rows.contains(&i) {
                    worst_violation = violation;
                    add = Some(i);
                }
            }
            match add {
                None => return Some(u),
                Some(i) if self.rows.len() < m => {
                    self.rows.push(i);
                    if !self.rebuild(g) {
                        self.rows.pop();
                        return None;
                    }
                }
                Some(_) => return None,
            }
        }
        None
    }

    /// Rebuilds the cache from a full solve so the next step starts warm.
    fn refresh(&mut self, g: &DMatrix<f64>, h: &DVector<f64>, u: &DVector<f64>) {
        let m = g.ncols();
        let gu = g * u;
        let mut cand: Vec<usize> = (0..h.len())
            .filter(|&i| h[i] - gu[i] <= 1e-7 * (1.0 + h[i].abs()))
            .collect();
        cand.sort_by(|&a, &b| (h[a] - gu[a]).partial_cmp(&(h[b] - gu[b])).unwrap());
        cand.truncate(m);
        self.rows = cand;
        while !self.rows.is_empty() && !self.rebuild(g) {
            self.rows.pop();
        }
    }
}

/// One closed-loop simulation.
#[derive(Debug, Clone)]
pub struct RolloutResult {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    /// Worst conjunction barrier value seen at any sampled step.
    pub min_barrier: f64,
}

/// Simulates `x' = A x + B u + p` under the minimum-norm barrier controller,
/// zero-order hold with step `dt`, from `t = 0` to `t_end`.
pub fn rollout(
    dynamics: &Dynamics,
    cb: &ConjunctionBarrier,
    gain: &ClassKGain,
    x0: &DVector<f64>,
    dt: f64,
    t_end: f64,
    qp: &dyn MinNormQp,
) -> Result<RolloutResult, InvarianceError> {
    if x0.len() != dynamics.n() {
        return Err(InvarianceError::Dimension(format!(
            "x0 has {} entries, state dimension is {}",
            x0.len(),
            dynamics.n()
        )));
    }
    if !(t_end >= 0.0) {
        return Err(InvarianceError::BadStep(t_end));
    }
    let zoh = discretize(dynamics, dt)?;
    let mut rows = task_rows(cb)?;
    bind_dynamics(&mut rows, dynamics)?;
    let kappa = gain.kappa();
    let m = dynamics.m();
    let au = dynamics.input_set.a();
    let bu = dynamics.input_set.b();

    let n_steps = ((t_end / dt) - 1e-9).ceil().max(0.0) as usize;
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut inputs = Vec::with_capacity(n_steps);
    let mut min_barrier = f64::INFINITY;

    // The constraint matrix only changes when a deadline passes; rebuild it
    // lazily and refresh the right-hand side in place every step.
    let mut active: Vec<usize> = Vec::new();
    let mut next_change = f64::MIN;
    let mut g = DMatrix::zeros(au.nrows(), m);
    let mut h = DVector::zeros(au.nrows());
    let mut wa: Vec<DVector<f64>> = rows.iter().map(|tr| DVector::zeros(tr.d.nrows())).collect();
    let mut wd: Vec<DVector<f64>> = rows.iter().map(|tr| DVector::zeros(tr.d.nrows())).collect();
    let mut warm = WarmActiveSet::empty();

    let mut x = x0.clone();
    let mut x_next = DVector::zeros(x0.len());
    for k in 0..=n_steps {
        let t = k as f64 * dt;
        if t >= next_change {
            active = (0..rows.len()).filter(|&l| rows[l].beta > t).collect();
            next_change = rows
                .iter()
                .map(|tr| tr.beta)
                .filter(|&b| b > t)
                .fold(f64::INFINITY, f64::min);
            warm.clear();
            let n_task: usize = active.iter().map(|&l| rows[l].d.nrows()).sum();
            g = DMatrix::zeros(n_task + au.nrows(), m);
            h = DVector::zeros(n_task + au.nrows());
            let mut at = 0;
            for &l in &active {
                let kk = rows[l].d.nrows();
                g.view_mut((at, 0), (kk, m)).copy_from(&rows[l].neg_db);
                at += kk;
            }
            g.view_mut((at, 0), (au.nrows(), m)).copy_from(au);
            h.rows_mut(at, au.nrows()).copy_from(bu);
        }

        let mut at = 0;
        for &l in &active {
            let tr = &rows[l];
            let (e, gg) = tr.segment(t);
            let gamma = e * t + gg;
            wa[l].gemv(1.0, &tr.da, &x, 0.0);
            wd[l].gemv(1.0, &tr.d, &x, 0.0);
            for i in 0..tr.d.nrows() {
                let b_row = wd[l][i] + tr.c[i] + gamma;
                h[at + i] = wa[l][i] + tr.dp[i] + e + kappa * b_row;
                min_barrier = min_barrier.min(b_row);
            }
            at += tr.d.nrows();
        }

        times.push(t);
        states.push(x.clone());
        if k == n_steps {
            break;
        }
        let u = match warm.try_step(&g, &h) {
            Some(u) => u,
            None => {
                let u = qp
                    .min_norm(&g, &h)
                    .ok_or(InvarianceError::QpInfeasible { t })?;
                warm.refresh(&g, &h, &u);
                u
            }
        };
        x_next.copy_from(&zoh.pd);
        x_next.gemv(1.0, &zoh.ad, &x, 1.0);
        x_next.gemv(1.0, &zoh.bd, &u, 1.0);
        std::mem::swap(&mut x, &mut x_next);
        inputs.push(u);
    }

    Ok(RolloutResult { times, states, inputs, min_barrier })
}
