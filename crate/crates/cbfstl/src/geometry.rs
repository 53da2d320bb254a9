//! Polyhedral sets in halfspace form, linear predicates, vertex enumeration,
//! and uniform sampling.
//!
//! Everything downstream works with compact sets `{x : A x <= b}`. Predicates
//! are concave piecewise-linear functions `h(x) = min_k (d_k' x + c_k)` whose
//! superlevel sets are again polyhedra.

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use rand::rngs::ChaCha8Rng;
use rand::RngExt;
use thiserror::Error;

use crate::solver::{chebyshev_center, SolverError};

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("the set is unbounded along coordinate {0}")]
    Unbounded(usize),
    #[error("vertex enumeration supports dimension <= 8, got {0}")]
    DimensionTooLarge(usize),
    #[error("empty time interval [{0}, {1}]")]
    EmptyInterval(f64, f64),
    #[error("the set has no interior point")]
    EmptySet,
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Concave piecewise-linear predicate `h(x) = min_k (d_k' x + c_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPredicate {
    pub d: DMatrix<f64>,
    pub c: DVector<f64>,
}

impl LinearPredicate {
    pub fn new(d: DMatrix<f64>, c: DVector<f64>) -> Result<Self, GeometryError> {
        if d.nrows() != c.len() {
            return Err(GeometryError::DimensionMismatch {
                expected: d.nrows(),
                got: c.len(),
            });
        }
        Ok(Self { d, c })
    }

    /// Axis-aligned box membership written as one row pair per coordinate.
    pub fn box_predicate(lower: &[f64], upper: &[f64]) -> Self {
        let n = lower.len();
        let mut d = DMatrix::zeros(2 * n, n);
        let mut c = DVector::zeros(2 * n);
        for i in 0..n {
            d[(2 * i, i)] = 1.0;
            c[2 * i] = -lower[i];
            d[(2 * i + 1, i)] = -1.0;
            c[2 * i + 1] = upper[i];
        }
        Self { d, c }
    }

    pub fn dim(&self) -> usize {
        self.d.ncols()
    }

    pub fn num_rows(&self) -> usize {
        self.d.nrows()
    }

    /// The superlevel set `{x : h(x) >= level}` in halfspace form.
    pub fn superlevel_rows(&self, level: f64) -> (DMatrix<f64>, DVector<f64>) {
        (-self.d.clone(), self.c.add_scalar(-level))
    }
}

/// `h(x) = min_k (d_k' x + c_k)`.
pub fn predicate_value(pred: &LinearPredicate, x: &DVector<f64>) -> f64 {
    let v = &pred.d * x + &pred.c;
    v.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Compact polyhedron `{x : A x <= b}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    a: DMatrix<f64>,
    b: DVector<f64>,
}

impl Polytope {
    /// Validating constructor: checks shapes and boundedness (one LP per
    /// coordinate direction on the recession cone).
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self, GeometryError> {
        if a.nrows() != b.len() {
            return Err(GeometryError::DimensionMismatch {
                expected: a.nrows(),
                got: b.len(),
            });
        }
        let p = Self { a, b };
        for i in 0..p.dim() {
            for sign in [1.0, -1.0] {
                if p.recession_extent(i, sign)? > 1e-9 {
                    return Err(GeometryError::Unbounded(i));
                }
            }
        }
        Ok(p)
    }

    /// Largest `sign * d_i` over the clipped recession cone
    /// `{d : A d <= 0, |d_j| <= 1}`; positive means unbounded.
    fn recession_extent(&self, i: usize, sign: f64) -> Result<f64, GeometryError> {
        use crate::solver::{Clarabel, ConvexProblem, ConvexSolve, Solved};
        let n = self.dim();
        let mut prob = ConvexProblem::new(n);
        prob.add_linear(i, -sign);
        for r in 0..self.a.nrows() {
            let cols: Vec<(usize, f64)> = (0..n).map(|j| (j, self.a[(r, j)])).collect();
            prob.add_ineq_row(&cols, 0.0);
        }
        for j in 0..n {
            prob.add_ineq_row(&[(j, 1.0)], 1.0);
            prob.add_ineq_row(&[(j, -1.0)], 1.0);
        }
        match Clarabel::default().solve(&prob)? {
            Solved::Optimal { objective, .. } => Ok(-objective),
            Solved::Infeasible => Ok(0.0),
        }
    }

    /// Axis-aligned box `[lower, upper]`.
    pub fn axis_box(lower: &[f64], upper: &[f64]) -> Result<Self, GeometryError> {
        if lower.len() != upper.len() {
            return Err(GeometryError::DimensionMismatch {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        let n = lower.len();
        let mut a = DMatrix::zeros(2 * n, n);
        let mut b = DVector::zeros(2 * n);
        for i in 0..n {
            if lower[i] > upper[i] {
                return Err(GeometryError::EmptyInterval(lower[i], upper[i]));
            }
            a[(2 * i, i)] = 1.0;
            b[2 * i] = upper[i];
            a[(2 * i + 1, i)] = -1.0;
            b[2 * i + 1] = -lower[i];
        }
        Ok(Self { a, b })
    }

    /// Intersection with extra halfspaces. Skips the boundedness check: a
    /// subset of a compact set is compact.
    pub fn with_extra_rows(&self, a_extra: &DMatrix<f64>, b_extra: &DVector<f64>) -> Polytope {
        let n = self.dim();
        let m0 = self.a.nrows();
        let m1 = a_extra.nrows();
        let mut a = DMatrix::zeros(m0 + m1, n);
        let mut b = DVector::zeros(m0 + m1);
        a.view_mut((0, 0), (m0, n)).copy_from(&self.a);
        a.view_mut((m0, 0), (m1, n)).copy_from(a_extra);
        b.rows_mut(0, m0).copy_from(&self.b);
        b.rows_mut(m0, m1).copy_from(b_extra);
        Polytope { a, b }
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn num_rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    /// Axis-aligned bounds implied by single-coordinate rows, when every
    /// coordinate has both a lower and an upper one.
    pub fn bounding_box(&self) -> Option<(DVector<f64>, DVector<f64>)> {
        let n = self.dim();
        let mut lo = DVector::from_element(n, f64::NEG_INFINITY);
        let mut hi = DVector::from_element(n, f64::INFINITY);
        for r in 0..self.a.nrows() {
            let row = self.a.row(r);
            let mut nz = None;
            for j in 0..n {
                if row[j] != 0.0 {
                    if nz.is_some() {
                        nz = None;
                        break;
                    }
                    nz = Some(j);
                }
            }
            if let Some(j) = nz {
                let coeff = row[j];
                let bound = self.b[r] / coeff;
                if coeff > 0.0 {
                    hi[j] = hi[j].min(bound);
                } else {
                    lo[j] = lo[j].max(bound);
                }
            }
        }
        if (0..n).all(|j| lo[j].is_finite() && hi[j].is_finite()) {
            Some((lo, hi))
        } else {
            None
        }
    }
}

/// `x` satisfies every row up to an absolute slack `tol`.
pub fn contains(p: &Polytope, x: &DVector<f64>, tol: f64) -> bool {
    let v = p.a() * x - p.b();
    v.iter().all(|&s| s <= tol)
}

/// Finite vertex list of a polytope, possibly with time appended.
#[derive(Debug, Clone, Default)]
pub struct VertexSet {
    pub vertices: Vec<DVector<f64>>,
}

impl VertexSet {
    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }
}

/// Exact vertex enumeration for dimension <= 8.
///
/// Boxes (every row a signed unit vector) take the 2^n corner route; anything
/// else enumerates basic feasible points over n-row subsets and filters.
pub fn enumerate_vertices(p: &Polytope) -> Result<VertexSet, GeometryError> {
    let n = p.dim();
    if n > 8 {
        return Err(GeometryError::DimensionTooLarge(n));
    }
    if let Some(corners) = box_corners(p) {
        return Ok(corners);
    }
    let m = p.num_rows();
    let mut vertices: Vec<DVector<f64>> = Vec::new();
    for combo in (0..m).combinations(n) {
        let a_sub = DMatrix::from_fn(n, n, |r, c| p.a()[(combo[r], c)]);
        let b_sub = DVector::from_fn(n, |r, _| p.b()[combo[r]]);
        let lu = a_sub.full_piv_lu();
        let Some(x) = lu.solve(&b_sub) else { continue };
        if !contains(p, &x, 1e-9) {
            continue;
        }
        if !vertices.iter().any(|v| (v - &x).amax() <= 1e-9) {
            vertices.push(x);
        }
    }
    Ok(VertexSet { vertices })
}

fn box_corners(p: &Polytope) -> Option<VertexSet> {
    let n = p.dim();
    let mut lo = vec![f64::NEG_INFINITY; n];
    let mut hi = vec![f64::INFINITY; n];
    for r in 0..p.num_rows() {
        let row = p.a().row(r);
        let mut nz = None;
        for j in 0..n {
            if row[j] != 0.0 {
                if nz.is_some() {
                    return None;
                }
                nz = Some(j);
            }
        }
        let j = nz?;
        let coeff = row[j];
        let bound = p.b()[r] / coeff;
        if coeff > 0.0 {
            hi[j] = hi[j].min(bound);
        } else {
            lo[j] = lo[j].max(bound);
        }
    }
    if (0..n).any(|j| !lo[j].is_finite() || !hi[j].is_finite()) {
        return None;
    }
    if (0..n).any(|j| lo[j] > hi[j]) {
        return Some(VertexSet::default());
    }
    let mut vertices = Vec::with_capacity(1 << n);
    for mask in 0u32..(1 << n) {
        let v = DVector::from_fn(n, |j, _| {
            if mask & (1 << j) != 0 {
                hi[j]
            } else {
                lo[j]
            }
        });
        if !vertices.iter().any(|w: &DVector<f64>| (w - &v).amax() <= 1e-9) {
            vertices.push(v);
        }
    }
    Some(VertexSet { vertices })
}

/// Lifts state vertices to space-time: each vertex appears at both interval
/// ends `s_lo` and `s_hi`.
pub fn space_time_vertices(
    vx: &VertexSet,
    s_lo: f64,
    s_hi: f64,
) -> Result<VertexSet, GeometryError> {
    if !(s_hi > s_lo) {
        return Err(GeometryError::EmptyInterval(s_lo, s_hi));
    }
    let mut vertices = Vec::with_capacity(2 * vx.len());
    for s in [s_lo, s_hi] {
        for v in &vx.vertices {
            let mut w = DVector::zeros(v.len() + 1);
            w.rows_mut(0, v.len()).copy_from(v);
            w[v.len()] = s;
            vertices.push(w);
        }
    }
    Ok(VertexSet { vertices })
}

/// Draws an (approximately) uniform point from the polytope.
///
/// Rejection sampling against the axis bounding box when one exists (capped at
/// 10_000 draws), otherwise hit-and-run from the Chebyshev centre with
/// `50 * dim` burn-in steps. A set whose Chebyshev radius is not positive is
/// reported as [`GeometryError::EmptySet`].
pub fn sample_uniform(p: &Polytope, rng: &mut ChaCha8Rng) -> Result<DVector<f64>, GeometryError> {
    let n = p.dim();
    if let Some((lo, hi)) = p.bounding_box() {
        for _ in 0..10_000 {
            let x = DVector::from_fn(n, |j, _| {
                if hi[j] > lo[j] {
                    rng.random_range(lo[j]..=hi[j])
                } else {
                    lo[j]
                }
            });
            if contains(p, &x, 0.0) {
                return Ok(x);
            }
        }
    }
    let Some((center, radius)) = chebyshev_center(p.a(), p.b())? else {
        return Err(GeometryError::EmptySet);
    };
    if radius <= 1e-12 {
        return Err(GeometryError::EmptySet);
    }
    let mut x = center;
    for _ in 0..50 * n {
        let d = random_direction(n, rng);
        let mut t_lo = f64::NEG_INFINITY;
        let mut t_hi = f64::INFINITY;
        for r in 0..p.num_rows() {
            let ad: f64 = (0..n).map(|j| p.a()[(r, j)] * d[j]).sum();
            let slack = p.b()[r] - (0..n).map(|j| p.a()[(r, j)] * x[j]).sum::<f64>();
            if ad > 1e-14 {
                t_hi = t_hi.min(slack / ad);
            } else if ad < -1e-14 {
                t_lo = t_lo.max(slack / ad);
            }
        }
        if !t_lo.is_finite() || !t_hi.is_finite() || t_hi <= t_lo {
            continue;
        }
        let t = rng.random_range(t_lo..=t_hi);
        x += t * &d;
    }
    Ok(x)
}

fn random_direction(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    loop {
        // Box-Muller pairs give an isotropic Gaussian, normalised below.
        let d = DVector::from_fn(n, |_, _| {
            let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        });
        let norm = d.norm();
        if norm > 1e-12 {
            return d / norm;
        }
    }
}
