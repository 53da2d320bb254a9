//! Convex-solver plumbing shared by the rest of the crate.
//!
//! Everything that needs an LP or QP goes through [`ConvexProblem`] and the
//! [`ConvexSolve`] trait, backed by Clarabel. The one exception is the
//! minimum-norm control QP solved millions of times per rollout, which gets a
//! dedicated dense active-set solver ([`DenseLdp`], Lawson–Hanson NNLS
//! reduction) with the interior-point backend kept as a cross-check and
//! fallback.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("solver failure: {0}")]
    Failure(String),
    #[error("problem is unbounded below")]
    Unbounded,
}

/// Sparse row-wise constraint block `A x (=|<=) b`.
#[derive(Debug, Clone, Default)]
pub struct SparseRows {
    entries: Vec<(usize, usize, f64)>,
    rhs: Vec<f64>,
}

impl SparseRows {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends one row given its nonzero entries; returns the row index.
    pub fn push_row(&mut self, cols: &[(usize, f64)], rhs: f64) -> usize {
        let row = self.rhs.len();
        for &(c, v) in cols {
            if v != 0.0 {
                self.entries.push((row, c, v));
            }
        }
        self.rhs.push(rhs);
        row
    }

    pub fn num_rows(&self) -> usize {
        self.rhs.len()
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    /// Evaluates `A x` densely (diagnostics, small systems only).
    pub fn dot(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.rhs.len());
        for &(r, c, v) in &self.entries {
            out[r] += v * x[c];
        }
        out
    }
}

fn to_csc(m: usize, n: usize, entries: &[(usize, usize, f64)]) -> CscMatrix<f64> {
    let mut tri: Vec<(usize, usize, f64)> = entries.to_vec();
    tri.sort_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
    let mut colptr = vec![0usize; n + 1];
    let mut rowval: Vec<usize> = Vec::with_capacity(tri.len());
    let mut nzval: Vec<f64> = Vec::with_capacity(tri.len());
    let mut last: Option<(usize, usize)> = None;
    for &(r, c, v) in &tri {
        if last == Some((c, r)) {
            *nzval.last_mut().unwrap() += v;
        } else {
            rowval.push(r);
            nzval.push(v);
            colptr[c + 1] += 1;
            last = Some((c, r));
        }
    }
    for c in 0..n {
        colptr[c + 1] += colptr[c];
    }
    CscMatrix::new(m, n, colptr, rowval, nzval)
}

/// A QP in the form `min 1/2 x'Px + q'x  s.t.  A_eq x = b_eq, A_ub x <= b_ub`.
///
/// With an empty quadratic part this is an LP.
#[derive(Debug, Clone)]
pub struct ConvexProblem {
    num_vars: usize,
    quad: Vec<(usize, usize, f64)>,
    linear: Vec<f64>,
    pub eq: SparseRows,
    pub ineq: SparseRows,
}

impl ConvexProblem {
    pub fn new(num_vars: usize) -> Self {
        Self {
            num_vars,
            quad: Vec::new(),
            linear: vec![0.0; num_vars],
            eq: SparseRows::new(),
            ineq: SparseRows::new(),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    /// Adds `v * x_i * x_j` to the objective (handles symmetry internally).
    pub fn add_quad(&mut self, i: usize, j: usize, v: f64) {
        if v == 0.0 {
            return;
        }
        let (lo, hi) = if i <= j { (i, j) } else { (j, i) };
        // Upper-triangular data for the 1/2 x'Px convention.
        if lo == hi {
            self.quad.push((lo, hi, 2.0 * v));
        } else {
            self.quad.push((lo, hi, v));
        }
    }

    pub fn add_linear(&mut self, i: usize, v: f64) {
        self.linear[i] += v;
    }

    pub fn add_eq_row(&mut self, cols: &[(usize, f64)], rhs: f64) -> usize {
        self.eq.push_row(cols, rhs)
    }

    pub fn add_ineq_row(&mut self, cols: &[(usize, f64)], rhs: f64) -> usize {
        self.ineq.push_row(cols, rhs)
    }
}

#[derive(Debug, Clone)]
pub enum Solved {
    Optimal { x: DVector<f64>, objective: f64 },
    Infeasible,
}

pub trait ConvexSolve {
    fn solve(&self, prob: &ConvexProblem) -> Result<Solved, SolverError>;
}

/// Interior-point backend.
#[derive(Debug, Clone)]
pub struct Clarabel {
    pub tol_feas: f64,
}

impl Default for Clarabel {
    fn default() -> Self {
        Self { tol_feas: 1e-9 }
    }
}

impl ConvexSolve for Clarabel {
    fn solve(&self, prob: &ConvexProblem) -> Result<Solved, SolverError> {
        let n = prob.num_vars;
        let n_eq = prob.eq.num_rows();
        let n_ub = prob.ineq.num_rows();

        // Fold the symmetrised quadratic entries into a clean upper triangle.
        let mut quad = prob.quad.clone();
        quad.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut folded: Vec<(usize, usize, f64)> = Vec::with_capacity(quad.len());
        for (i, j, v) in quad {
            if let Some(last) = folded.last_mut() {
                if last.0 == i && last.1 == j {
                    last.2 += v;
                    continue;
                }
            }
            folded.push((i, j, v));
        }
        let p_entries: Vec<(usize, usize, f64)> =
            folded.iter().map(|&(i, j, v)| (i, j, v)).collect();
        let p = to_csc(n, n, &p_entries);

        let mut entries: Vec<(usize, usize, f64)> = prob.eq.entries().to_vec();
        for &(r, c, v) in prob.ineq.entries() {
            entries.push((r + n_eq, c, v));
        }
        let a = to_csc(n_eq + n_ub, n, &entries);
        let mut b = prob.eq.rhs().to_vec();
        b.extend_from_slice(prob.ineq.rhs());

        let cones = [
            SupportedConeT::ZeroConeT(n_eq),
            SupportedConeT::NonnegativeConeT(n_ub),
        ];

        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .tol_feas(self.tol_feas)
            .tol_gap_abs(1e-9)
            .tol_gap_rel(1e-9)
            .build()
            .map_err(|e| SolverError::Failure(format!("settings: {e}")))?;

        let mut solver = DefaultSolver::new(&p, &prob.linear, &a, &b, &cones, settings)
            .map_err(|e| SolverError::Failure(format!("setup: {e:?}")))?;
        solver.solve();

        let status = solver.solution.status;
        match status {
            SolverStatus::Solved | SolverStatus::AlmostSolved => Ok(Solved::Optimal {
                x: DVector::from_vec(solver.solution.x.clone()),
                objective: solver.solution.obj_val,
            }),
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                Ok(Solved::Infeasible)
            }
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
                Err(SolverError::Unbounded)
            }
            other => Err(SolverError::Failure(format!("{other:?}"))),
        }
    }
}

/// Chebyshev centre of `{x : A x <= b}`.
///
/// Returns `None` when the set is empty; otherwise the centre and the radius
/// of the largest inscribed ball (zero radius means no interior).
pub fn chebyshev_center(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<Option<(DVector<f64>, f64)>, SolverError> {
    let n = a.ncols();
    let mut prob = ConvexProblem::new(n + 1);
    prob.add_linear(n, -1.0);
    for i in 0..a.nrows() {
        let norm = a.row(i).norm();
        let mut cols: Vec<(usize, f64)> = (0..n).map(|j| (j, a[(i, j)])).collect();
        cols.push((n, norm));
        prob.add_ineq_row(&cols, b[i]);
    }
    // Keep the LP bounded even on degenerate input.
    prob.add_ineq_row(&[(n, 1.0)], 1e9);
    prob.add_ineq_row(&[(n, -1.0)], 0.0);
    match Clarabel::default().solve(&prob)? {
        Solved::Optimal { x, .. } => {
            let center = DVector::from_fn(n, |i, _| x[i]);
            Ok(Some((center, x[n])))
        }
        Solved::Infeasible => Ok(None),
    }
}

/// Minimum-norm QP backend: `min ||u||^2  s.t.  G u <= h`.
pub trait MinNormQp {
    /// Returns the minimiser, or `None` when the constraints are infeasible.
    fn min_norm(&self, g: &DMatrix<f64>, h: &DVector<f64>) -> Option<DVector<f64>>;
}

/// Dense Lawson–Hanson solver, the hot path for closed-loop control.
///
/// `min ||u|| s.t. G u <= h` is a least-distance program; with
/// `E = [-G' ; -h']` and `f = e_{n+1}` the NNLS residual `r = E v - f`
/// recovers the minimiser as `u_j = r_j / r_{n+1}` (infeasible iff `r = 0`).
/// Solutions are verified against the original rows and handed to the
/// interior-point backend on the rare numerical failure.
#[derive(Debug, Clone, Default)]
pub struct DenseLdp;

impl DenseLdp {
    const FEAS_TOL: f64 = 1e-8;

    fn solve_ldp(g: &DMatrix<f64>, h: &DVector<f64>) -> Option<DVector<f64>> {
        let (m, n) = (g.nrows(), g.ncols());
        // Row-normalise for conditioning; the feasible set is unchanged.
        let mut e = DMatrix::zeros(n + 1, m);
        for k in 0..m {
            let norm = g.row(k).norm().max(1e-300);
            for j in 0..n {
                e[(j, k)] = -g[(k, j)] / norm;
            }
            e[(n, k)] = -h[k] / norm;
        }
        let mut f = DVector::zeros(n + 1);
        f[n] = 1.0;
        let v = nnls(&e, &f, 30 * (m + 1));
        let r = &e * &v - &f;
        let rn = r[n];
        if rn.abs() < 1e-12 {
            return None;
        }
        Some(DVector::from_fn(n, |j, _| r[j] / rn))
    }
}

impl MinNormQp for DenseLdp {
    fn min_norm(&self, g: &DMatrix<f64>, h: &DVector<f64>) -> Option<DVector<f64>> {
        if h.iter().all(|&hi| hi >= 0.0) {
            return Some(DVector::zeros(g.ncols()));
        }
        if let Some(u) = Self::solve_ldp(g, h) {
            let slack = h - g * &u;
            if slack.iter().all(|&s| s >= -Self::FEAS_TOL) {
                return Some(u);
            }
        }
        // Numerical trouble: let the interior-point backend arbitrate.
        ClarabelMinNorm.min_norm(g, h)
    }
}

/// Interior-point route for the same QP; used for cross-checks and fallback.
#[derive(Debug, Clone, Default)]
pub struct ClarabelMinNorm;

impl MinNormQp for ClarabelMinNorm {
    fn min_norm(&self, g: &DMatrix<f64>, h: &DVector<f64>) -> Option<DVector<f64>> {
        let n = g.ncols();
        let mut prob = ConvexProblem::new(n);
        for j in 0..n {
            prob.add_quad(j, j, 1.0);
        }
        for i in 0..g.nrows() {
            let cols: Vec<(usize, f64)> = (0..n).map(|j| (j, g[(i, j)])).collect();
            prob.add_ineq_row(&cols, h[i]);
        }
        match Clarabel::default().solve(&prob) {
            Ok(Solved::Optimal { x, .. }) => Some(x),
            Ok(Solved::Infeasible) => None,
            Err(_) => None,
        }
    }
}

/// Lawson–Hanson nonnegative least squares: `min ||E u - f||` s.t. `u >= 0`.
fn nnls(e: &DMatrix<f64>, f: &DVector<f64>, max_iter: usize) -> DVector<f64> {
    let m = e.ncols();
    let mut u = DVector::<f64>::zeros(m);
    let mut passive = vec![false; m];
    let tol = 1e-11 * (1.0 + f.norm());
    let mut w = e.transpose() * (f - e * &u);

    for _ in 0..max_iter {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..m {
            if !passive[j] && w[j] > tol {
                if best.map_or(true, |(_, bw)| w[j] > bw) {
                    best = Some((j, w[j]));
                }
            }
        }
        let Some((t, _)) = best else { break };
        passive[t] = true;

        loop {
            let idx: Vec<usize> = (0..m).filter(|&j| passive[j]).collect();
            let ep = DMatrix::from_fn(e.nrows(), idx.len(), |r, c| e[(r, idx[c])]);
            let svd = ep.svd(true, true);
            let z_p = svd.solve(f, 1e-13).expect("svd solve");
            if z_p.iter().all(|&z| z > 0.0) {
                u.fill(0.0);
                for (c, &j) in idx.iter().enumerate() {
                    u[j] = z_p[c];
                }
                break;
            }
            let mut alpha = f64::INFINITY;
            for (c, &j) in idx.iter().enumerate() {
                if z_p[c] <= 0.0 {
                    let denom = u[j] - z_p[c];
                    if denom > 0.0 {
                        alpha = alpha.min(u[j] / denom);
                    } else {
                        alpha = 0.0;
                    }
                }
            }
            if !alpha.is_finite() {
                break;
            }
            for (c, &j) in idx.iter().enumerate() {
                u[j] += alpha * (z_p[c] - u[j]);
            }
            for &j in &idx {
                if u[j] <= 1e-14 {
                    u[j] = 0.0;
                    passive[j] = false;
                }
            }
            if !(0..m).any(|j| passive[j]) {
                break;
            }
        }
        w = e.transpose() * (f - e * &u);
    }
    u
}
