//! Time-varying barrier profiles for atomic tasks and their conjunction.
//!
//! Each task gets a scalar profile `gamma(t)` that is piecewise linear with
//! one knee: it starts at `gamma_bar - r`, falls linearly to `-r` at time
//! `alpha`, and holds `-r` until the task deadline `beta`. The task barrier is
//! `b(x, t) = h(x) + gamma(t)` for the task's concave predicate `h`, so its
//! zero-superlevel set in space is a polyhedron that shrinks toward the
//! predicate's `r`-superlevel set as `t` approaches `alpha` and then stays
//! there. `(gamma_bar, r)` are free parameters until the encoder binds them.
//!
//! Segment bookkeeping: segment 1 is the sloped part `[0, alpha)`, segment 2
//! the flat part `[alpha, beta]`. A task whose `alpha` is zero only ever has
//! segment 2 and its `gamma_bar` must be zero.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::formula::{AtomicTask, TaskKind};
use crate::geometry::{LinearPredicate, Polytope};

#[derive(Debug, Error)]
pub enum BarrierError {
    #[error("free time {given} outside the allowed window [{lo}, {hi}]")]
    FreeTimeOutOfRange { given: f64, lo: f64, hi: f64 },
    #[error("always-eventually tasks must be decomposed before a barrier is built")]
    DecomposeFirst,
    #[error("time {t} outside the barrier domain [0, {beta}]")]
    OutOfDomain { t: f64, beta: f64 },
    #[error("barrier parameters are unbound; encode them first")]
    ParametersUnbound,
    #[error("{0} is not a switch time")]
    NotASwitchTime(f64),
    #[error("dimension mismatch: predicate has {pred} columns, state set {state}")]
    DimensionMismatch { pred: usize, state: usize },
}

/// Scalar affine function of the task parameters `(gamma_bar, r)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamAffine {
    pub constant: f64,
    pub gamma_bar: f64,
    pub r: f64,
}

impl ParamAffine {
    pub fn eval(&self, gamma_bar: f64, r: f64) -> f64 {
        self.constant + self.gamma_bar * gamma_bar + self.r * r
    }
}

/// One segment of the barrier in matrix form: rows
/// `d_k' x + e * t + g + c_k >= 0` with `e`, `g` affine in the parameters.
#[derive(Debug, Clone)]
pub struct SegmentForm {
    pub d: DMatrix<f64>,
    pub c: DVector<f64>,
    pub e: ParamAffine,
    pub g: ParamAffine,
}

/// Barrier data for a single atomic task.
#[derive(Debug, Clone)]
pub struct TaskBarrier {
    pub task: AtomicTask,
    pub predicate: LinearPredicate,
    pub alpha: f64,
    pub beta: f64,
    theta: Option<(f64, f64)>,
}

/// Builds the barrier skeleton for one task.
///
/// The free time parameter places `alpha` inside the window the task leaves
/// open: anywhere in `[a, b]` for an eventually task (default: the midpoint),
/// anywhere in `[a + a', b + a']` for an eventually-always task (default:
/// `a' + (a + b) / 2`), and nowhere for an always task, which is pinned to
/// `alpha = a`, `beta = b`. Always-eventually tasks must be decomposed first.
pub fn make_task_barrier(
    task: &AtomicTask,
    predicate: &LinearPredicate,
    free_time: Option<f64>,
) -> Result<TaskBarrier, BarrierError> {
    let (alpha, beta) = match task.kind {
        TaskKind::Eventually => {
            let (lo, hi) = (task.outer.a, task.outer.b);
            let alpha = free_time.unwrap_or(0.5 * (lo + hi));
            if alpha < lo || alpha > hi {
                return Err(BarrierError::FreeTimeOutOfRange { given: alpha, lo, hi });
            }
            (alpha, alpha)
        }
        TaskKind::Always => {
            let (lo, hi) = (task.outer.a, task.outer.a);
            if let Some(t) = free_time {
                if t != task.outer.a {
                    return Err(BarrierError::FreeTimeOutOfRange { given: t, lo, hi });
                }
            }
            (task.outer.a, task.outer.b)
        }
        TaskKind::EventuallyAlways => {
            let inner = task.inner.expect("eventually-always task carries an inner interval");
            let lo = task.outer.a + inner.a;
            let hi = task.outer.b + inner.a;
            let alpha = free_time.unwrap_or(inner.a + 0.5 * (task.outer.a + task.outer.b));
            if alpha < lo || alpha > hi {
                return Err(BarrierError::FreeTimeOutOfRange { given: alpha, lo, hi });
            }
            (alpha, alpha + inner.length())
        }
        TaskKind::AlwaysEventually => return Err(BarrierError::DecomposeFirst),
    };
    Ok(TaskBarrier {
        task: task.clone(),
        predicate: predicate.clone(),
        alpha,
        beta,
        theta: None,
    })
}

impl TaskBarrier {
    /// Binds the two free parameters chosen by the encoder.
    pub fn bind(&mut self, gamma_bar: f64, r: f64) {
        self.theta = Some((gamma_bar, r));
    }

    pub fn is_bound(&self) -> bool {
        self.theta.is_some()
    }

    pub fn theta(&self) -> Option<(f64, f64)> {
        self.theta
    }

    /// The anchor and deadline `(alpha, beta)`.
    pub fn domain(&self) -> (f64, f64) {
        (self.alpha, self.beta)
    }

    /// Segment index at time `t`: 1 on `[0, alpha)`, 2 on `[alpha, beta]`.
    pub fn upsilon(&self, t: f64) -> Result<u8, BarrierError> {
        if t < 0.0 || t > self.beta {
            return Err(BarrierError::OutOfDomain { t, beta: self.beta });
        }
        Ok(if t < self.alpha { 1 } else { 2 })
    }

    /// Matrix form of one segment, parameters kept symbolic.
    pub fn matrix_form(&self, segment: u8) -> SegmentForm {
        let (e, g) = self.segment_coeffs(segment);
        SegmentForm {
            d: self.predicate.d.clone(),
            c: self.predicate.c.clone(),
            e,
            g,
        }
    }

    /// `(e, g)` of `gamma(t) = e t + g` on the given segment.
    pub fn segment_coeffs(&self, segment: u8) -> (ParamAffine, ParamAffine) {
        let zero = ParamAffine { constant: 0.0, gamma_bar: 0.0, r: 0.0 };
        match segment {
            1 if self.alpha > 0.0 => (
                ParamAffine { gamma_bar: -1.0 / self.alpha, ..zero },
                ParamAffine { gamma_bar: 1.0, r: -1.0, ..zero },
            ),
            _ => (zero, ParamAffine { r: -1.0, ..zero }),
        }
    }

    /// Numeric `(e, g)` once the parameters are bound.
    pub fn segment_values(&self, segment: u8) -> Result<(f64, f64), BarrierError> {
        let (gamma_bar, r) = self.theta.ok_or(BarrierError::ParametersUnbound)?;
        let (e, g) = self.segment_coeffs(segment);
        Ok((e.eval(gamma_bar, r), g.eval(gamma_bar, r)))
    }

    /// `gamma(t)`.
    pub fn gamma_eval(&self, t: f64) -> Result<f64, BarrierError> {
        let seg = self.upsilon(t)?;
        let (e, g) = self.segment_values(seg)?;
        Ok(e * t + g)
    }

    /// Task barrier value `b(x, t) = h(x) + gamma(t)`.
    pub fn value(&self, x: &DVector<f64>, t: f64) -> Result<f64, BarrierError> {
        Ok(crate::geometry::predicate_value(&self.predicate, x) + self.gamma_eval(t)?)
    }

    /// Halfspace rows of `{x : b(x, t) >= 0}`: `-D x <= c + gamma(t)`.
    pub fn superlevel_rows(&self, t: f64) -> Result<(DMatrix<f64>, DVector<f64>), BarrierError> {
        let gamma = self.gamma_eval(t)?;
        Ok((
            -self.predicate.d.clone(),
            self.predicate.c.add_scalar(gamma),
        ))
    }
}

/// Barrier for a conjunction of tasks over a common compact state set.
#[derive(Debug, Clone)]
pub struct ConjunctionBarrier {
    pub tasks: Vec<TaskBarrier>,
    pub state_set: Polytope,
}

/// Relative tolerance used when matching switch times.
fn time_eq(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

impl ConjunctionBarrier {
    pub fn new(tasks: Vec<TaskBarrier>, state_set: Polytope) -> Result<Self, BarrierError> {
        for tb in &tasks {
            if tb.predicate.dim() != state_set.dim() {
                return Err(BarrierError::DimensionMismatch {
                    pred: tb.predicate.dim(),
                    state: state_set.dim(),
                });
            }
        }
        Ok(Self { tasks, state_set })
    }

    /// Latest deadline; the barrier set equals the state set after this.
    pub fn beta_max(&self) -> f64 {
        self.tasks.iter().map(|t| t.beta).fold(0.0, f64::max)
    }

    /// Indices of tasks still active at `t` (deadlines strictly ahead).
    pub fn active_set(&self, t: f64) -> Vec<usize> {
        (0..self.tasks.len())
            .filter(|&l| self.tasks[l].beta > t)
            .collect()
    }

    /// Sorted, deduplicated `{0} U {alpha_l} U {beta_l}`.
    pub fn switch_times(&self) -> Vec<f64> {
        let mut ts = vec![0.0];
        for tb in &self.tasks {
            ts.push(tb.alpha);
            ts.push(tb.beta);
        }
        ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ts.dedup_by(|a, b| time_eq(*a, *b));
        ts
    }

    /// Conjunction barrier value: the worst active task, `+inf` when none.
    pub fn value(&self, x: &DVector<f64>, t: f64) -> Result<f64, BarrierError> {
        let mut v = f64::INFINITY;
        for &l in &self.active_set(t) {
            v = v.min(self.tasks[l].value(x, t)?);
        }
        Ok(v)
    }

    /// The time-slice `{x in X : b(x, t) >= 0}`, right-continuous in `t`
    /// (tasks drop out exactly at their deadline). For `t` at or beyond the
    /// last deadline this is the plain state set.
    pub fn set_at(&self, t: f64) -> Result<Polytope, BarrierError> {
        self.slice(&self.active_set(t), t)
    }

    /// Left limit of [`Self::set_at`] at a switch time: tasks whose deadline
    /// is exactly `t` still contribute their terminal rows.
    pub fn limit_from_left(&self, t: f64) -> Result<Polytope, BarrierError> {
        if t <= 0.0 || !self.switch_times().iter().any(|&s| time_eq(s, t)) {
            return Err(BarrierError::NotASwitchTime(t));
        }
        let active: Vec<usize> = (0..self.tasks.len())
            .filter(|&l| self.tasks[l].beta > t || time_eq(self.tasks[l].beta, t))
            .collect();
        self.slice(&active, t)
    }

    /// Like [`Self::set_at`] but keeping tasks whose deadline is exactly `t`;
    /// this is the closure the planner enforces at trajectory knots.
    pub fn rows_closed_at(&self, t: f64) -> Result<Polytope, BarrierError> {
        let active: Vec<usize> = (0..self.tasks.len())
            .filter(|&l| self.tasks[l].beta > t || time_eq(self.tasks[l].beta, t))
            .collect();
        self.slice(&active, t)
    }

    fn slice(&self, active: &[usize], t: f64) -> Result<Polytope, BarrierError> {
        let mut p = self.state_set.clone();
        for &l in active {
            let tb = &self.tasks[l];
            // Clamp into the task domain so terminal rows evaluate at beta.
            let tt = t.min(tb.beta).max(0.0);
            let (a, b) = tb.superlevel_rows(tt)?;
            p = p.with_extra_rows(&a, &b);
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formula::Interval;
    use crate::geometry::contains;
    use approx::assert_relative_eq;
    use nalgebra::dvector;

    fn iv(a: f64, b: f64) -> Interval {
        Interval { a, b }
    }

    fn box_pred(lo: f64, hi: f64) -> LinearPredicate {
        LinearPredicate::box_predicate(&[lo], &[hi])
    }

    fn f_task(a: f64, b: f64) -> AtomicTask {
        AtomicTask { kind: TaskKind::Eventually, outer: iv(a, b), inner: None, predicate: 0 }
    }

    fn g_task(a: f64, b: f64) -> AtomicTask {
        AtomicTask { kind: TaskKind::Always, outer: iv(a, b), inner: None, predicate: 0 }
    }

    #[test]
    fn free_time_defaults_and_bounds() {
        let pred = box_pred(0.0, 1.0);
        let tb = make_task_barrier(&f_task(20.0, 25.0), &pred, None).unwrap();
        assert_eq!(tb.alpha, 22.5);
        assert_eq!(tb.beta, 22.5);
        assert!(matches!(
            make_task_barrier(&f_task(20.0, 25.0), &pred, Some(26.0)),
            Err(BarrierError::FreeTimeOutOfRange { .. })
        ));

        let g = make_task_barrier(&g_task(255.0, 265.0), &pred, None).unwrap();
        assert_eq!((g.alpha, g.beta), (255.0, 265.0));

        let fg = AtomicTask {
            kind: TaskKind::EventuallyAlways,
            outer: iv(1.0, 3.0),
            inner: Some(iv(0.5, 2.5)),
            predicate: 0,
        };
        let tb = make_task_barrier(&fg, &pred, None).unwrap();
        assert_eq!(tb.alpha, 2.5); // 0.5 + (1+3)/2
        assert_eq!(tb.beta, 4.5); // alpha + inner length
    }

    #[test]
    fn gf_tasks_must_be_decomposed() {
        let gf = AtomicTask {
            kind: TaskKind::AlwaysEventually,
            outer: iv(0.0, 10.0),
            inner: Some(iv(0.0, 2.0)),
            predicate: 0,
        };
        assert!(matches!(
            make_task_barrier(&gf, &box_pred(0.0, 1.0), None),
            Err(BarrierError::DecomposeFirst)
        ));
    }

    #[test]
    fn gamma_is_a_knee_function() {
        let mut tb = make_task_barrier(&f_task(2.0, 6.0), &box_pred(0.0, 1.0), Some(4.0)).unwrap();
        assert!(matches!(tb.gamma_eval(1.0), Err(BarrierError::ParametersUnbound)));
        tb.bind(8.0, 0.5);
        assert_relative_eq!(tb.gamma_eval(0.0).unwrap(), 7.5);
        assert_relative_eq!(tb.gamma_eval(2.0).unwrap(), 3.5);
        assert_relative_eq!(tb.gamma_eval(4.0).unwrap(), -0.5);
        assert!(matches!(
            tb.gamma_eval(4.1),
            Err(BarrierError::OutOfDomain { .. })
        ));
        assert_eq!(tb.upsilon(0.0).unwrap(), 1);
        assert_eq!(tb.upsilon(3.9).unwrap(), 1);
        assert_eq!(tb.upsilon(4.0).unwrap(), 2);
    }

    #[test]
    fn gamma_is_continuous_at_the_knee() {
        let mut tb =
            make_task_barrier(&g_task(3.0, 7.0), &box_pred(0.0, 1.0), None).unwrap();
        tb.bind(2.0, 0.25);
        let eps = 1e-9;
        let left = tb.gamma_eval(3.0 - eps).unwrap();
        let right = tb.gamma_eval(3.0).unwrap();
        assert!((left - right).abs() < 1e-8);
        assert_relative_eq!(right, -0.25);
        assert_relative_eq!(tb.gamma_eval(7.0).unwrap(), -0.25);
    }

    #[test]
    fn degenerate_alpha_zero_has_single_segment() {
        let mut tb = make_task_barrier(&g_task(0.0, 5.0), &box_pred(0.0, 1.0), None).unwrap();
        tb.bind(0.0, 0.3);
        assert_eq!(tb.upsilon(0.0).unwrap(), 2);
        assert_relative_eq!(tb.gamma_eval(0.0).unwrap(), -0.3);
        let (e, g) = tb.segment_values(1).unwrap();
        assert_eq!(e, 0.0);
        assert_relative_eq!(g, -0.3);
    }

    #[test]
    fn matrix_form_matches_direct_evaluation() {
        let mut tb = make_task_barrier(&f_task(2.0, 6.0), &box_pred(-1.0, 3.0), Some(4.0)).unwrap();
        tb.bind(5.0, 0.5);
        let x = dvector![1.25];
        for t in [0.0, 1.0, 3.99, 4.0] {
            let seg = tb.upsilon(t).unwrap();
            let form = tb.matrix_form(seg);
            let e = form.e.eval(5.0, 0.5);
            let g = form.g.eval(5.0, 0.5);
            let rows = &form.d * &x + &form.c;
            let via_form = rows.min() + e * t + g;
            assert_relative_eq!(via_form, tb.value(&x, t).unwrap(), epsilon = 1e-12);
        }
    }

    fn two_task_barrier() -> ConjunctionBarrier {
        let x_set = Polytope::axis_box(&[-10.0], &[10.0]).unwrap();
        let mut t1 = make_task_barrier(&f_task(4.0, 4.0), &box_pred(4.0, 8.0), None).unwrap();
        t1.bind(10.0, 1.0);
        let mut t2 = make_task_barrier(&g_task(6.0, 9.0), &box_pred(-6.0, -2.0), None).unwrap();
        t2.bind(30.0, 0.5);
        ConjunctionBarrier::new(vec![t1, t2], x_set).unwrap()
    }

    #[test]
    fn switch_times_and_active_sets() {
        let cb = two_task_barrier();
        assert_eq!(cb.switch_times(), vec![0.0, 4.0, 6.0, 9.0]);
        assert_eq!(cb.active_set(0.0), vec![0, 1]);
        assert_eq!(cb.active_set(4.0), vec![1]); // first deadline passed
        assert_eq!(cb.active_set(9.0), Vec::<usize>::new());
        assert_eq!(cb.beta_max(), 9.0);
    }

    #[test]
    fn set_at_shrinks_toward_the_target() {
        let cb = two_task_barrier();
        // At t=0 the first task allows h >= -(gamma(0)) = -(10-1) around [4,8].
        let s0 = cb.set_at(0.0).unwrap();
        assert!(contains(&s0, &dvector![0.0], 1e-12));
        // Just before its deadline the first task pins x near [4+r, 8-r].
        let s4 = cb.limit_from_left(4.0).unwrap();
        assert!(contains(&s4, &dvector![6.0], 1e-12));
        assert!(!contains(&s4, &dvector![4.5], 1e-12)); // inside box, outside r-level
        assert!(!contains(&s4, &dvector![0.0], 1e-12));
        // Right-continuity: at t=4 the set releases the first target.
        let s4r = cb.set_at(4.0).unwrap();
        assert!(contains(&s4r, &dvector![0.0], 1e-9));
        // After every deadline the set is the state set.
        let s9 = cb.set_at(9.0).unwrap();
        assert!(contains(&s9, &dvector![9.9], 1e-12));
    }

    #[test]
    fn left_limit_requires_a_switch_time() {
        let cb = two_task_barrier();
        assert!(matches!(
            cb.limit_from_left(5.0),
            Err(BarrierError::NotASwitchTime(_))
        ));
        assert!(cb.limit_from_left(6.0).is_ok());
    }

    #[test]
    fn conjunction_value_is_the_worst_task() {
        let cb = two_task_barrier();
        let x = dvector![5.0];
        let v = cb.value(&x, 0.0).unwrap();
        let v0 = cb.tasks[0].value(&x, 0.0).unwrap();
        let v1 = cb.tasks[1].value(&x, 0.0).unwrap();
        assert_relative_eq!(v, v0.min(v1));
        assert_eq!(cb.value(&x, 9.5).unwrap(), f64::INFINITY);
    }
}
