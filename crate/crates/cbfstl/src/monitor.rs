//! Quantitative STL semantics over sampled trajectories.
//!
//! Signals are piecewise linear between knots. Temporal operators are
//! evaluated over an explicit finite sample set per window `[lo, hi]`:
//!
//! ```text
//! { lo + k * dense_dt : k = 0..floor((hi - lo) / dense_dt + 1e-9) }
//!   U { hi }  U  { signal knots strictly inside (lo, hi) }
//! ```
//!
//! sorted with exact duplicates removed. Including the knots makes the
//! minimum of a predicate row exact (a concave piecewise-linear function of
//! time attains its minimum at segment ends) and removes the dominant
//! discretization bias from the maximum.
//!
//! Two evaluation routes share that contract: a direct recursion, and a
//! sliding-window pass over the knot grid for signals whose knots are
//! uniformly spaced and whose window ends land on them (then the sample set
//! per window is exactly a knot range). The entry point picks the recursion
//! unless the predicted evaluation count is large and the grid route applies.

use nalgebra::DVector;
use std::collections::VecDeque;
use thiserror::Error;

use crate::formula::{horizon, Interval, StlFormula};
use crate::geometry::{predicate_value, LinearPredicate};

#[derive(Debug, Error)]
pub enum MonitorError {
    #[error("signal covers up to t = {have}, but evaluation needs t = {needed}")]
    Coverage { needed: f64, have: f64 },
    #[error("bad signal: {0}")]
    BadSignal(String),
    #[error("dense_dt must be positive, got {0}")]
    BadStep(f64),
    #[error("formula references predicate {index}, table has {len}")]
    UnknownPredicate { index: usize, len: usize },
    #[error("the grid route needs uniform knots and aligned windows")]
    GridIneligible,
}

/// Piecewise-linear signal on strictly increasing knot times.
#[derive(Debug, Clone)]
pub struct SampledSignal {
    times: Vec<f64>,
    states: Vec<DVector<f64>>,
}

impl SampledSignal {
    pub fn new(times: Vec<f64>, states: Vec<DVector<f64>>) -> Result<Self, MonitorError> {
        if times.len() < 2 {
            return Err(MonitorError::BadSignal(format!(
                "need at least 2 knots, got {}",
                times.len()
            )));
        }
        if times.len() != states.len() {
            return Err(MonitorError::BadSignal(format!(
                "{} times vs {} states",
                times.len(),
                states.len()
            )));
        }
        if !times.windows(2).all(|w| w[1] > w[0]) {
            return Err(MonitorError::BadSignal("times must strictly increase".into()));
        }
        let dim = states[0].len();
        if states.iter().any(|s| s.len() != dim) {
            return Err(MonitorError::BadSignal("state dimensions differ".into()));
        }
        Ok(Self { times, states })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[DVector<f64>] {
        &self.states
    }

    pub fn dim(&self) -> usize {
        self.states[0].len()
    }

    pub fn start_time(&self) -> f64 {
        self.times[0]
    }

    pub fn end_time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Interpolated state; knot times return the stored state exactly, and
    /// queries are clamped to the covered range.
    pub fn value_at(&self, t: f64) -> DVector<f64> {
        match self.times.binary_search_by(|v| v.partial_cmp(&t).unwrap()) {
            Ok(k) => self.states[k].clone(),
            Err(0) => self.states[0].clone(),
            Err(k) if k == self.times.len() => self.states[k - 1].clone(),
            Err(k) => {
                let (t0, t1) = (self.times[k - 1], self.times[k]);
                let s = (t - t0) / (t1 - t0);
                (1.0 - s) * &self.states[k - 1] + s * &self.states[k]
            }
        }
    }

    /// Indices of knots strictly inside `(lo, hi)`.
    fn interior_knots(&self, lo: f64, hi: f64) -> std::ops::Range<usize> {
        let a = self.times.partition_point(|&t| t <= lo);
        let b = self.times.partition_point(|&t| t < hi);
        a..b
    }
}

/// Evaluation strategy. `Auto` is the documented default; the explicit
/// routes exist so tests can compare them on the same instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalRoute {
    Auto,
    Naive,
    Grid,
}

/// Robustness degree of `f` over `sig` anchored at `t0`.
pub fn robustness(
    f: &StlFormula,
    predicates: &[LinearPredicate],
    sig: &SampledSignal,
    t0: f64,
    dense_dt: f64,
) -> Result<f64, MonitorError> {
    robustness_with(f, predicates, sig, t0, dense_dt, EvalRoute::Auto)
}

/// Threshold for switching away from the direct recursion.
const NAIVE_EVAL_BUDGET: f64 = 2e6;

pub fn robustness_with(
    f: &StlFormula,
    predicates: &[LinearPredicate],
    sig: &SampledSignal,
    t0: f64,
    dense_dt: f64,
    route: EvalRoute,
) -> Result<f64, MonitorError> {
    if !(dense_dt > 0.0) || !dense_dt.is_finite() {
        return Err(MonitorError::BadStep(dense_dt));
    }
    check_predicates(f, predicates, sig.dim())?;
    let needed = t0 + horizon(f);
    let have = sig.end_time();
    let tol = 1e-9 * needed.abs().max(1.0);
    if sig.start_time() > t0 + tol || have < needed - tol {
        return Err(MonitorError::Coverage { needed, have });
    }
    match route {
        EvalRoute::Naive => Ok(eval_naive(f, predicates, sig, t0, dense_dt)),
        EvalRoute::Grid => grid_eval(f, predicates, sig, t0, dense_dt)
            .ok_or(MonitorError::GridIneligible),
        EvalRoute::Auto => {
            let ds = (sig.end_time() - sig.start_time()) / (sig.times.len() - 1) as f64;
            if predicted_evals(f, dense_dt, ds) <= NAIVE_EVAL_BUDGET {
                return Ok(eval_naive(f, predicates, sig, t0, dense_dt));
            }
            match grid_eval(f, predicates, sig, t0, dense_dt) {
                Some(v) => Ok(v),
                None => Ok(eval_naive(f, predicates, sig, t0, dense_dt)),
            }
        }
    }
}

/// `(sig, 0) satisfies f with degree r`, i.e. robustness at zero is >= r.
pub fn satisfies_with_degree(
    f: &StlFormula,
    predicates: &[LinearPredicate],
    sig: &SampledSignal,
    r: f64,
    dense_dt: f64,
) -> Result<bool, MonitorError> {
    Ok(robustness(f, predicates, sig, 0.0, dense_dt)? >= r)
}

fn check_predicates(
    f: &StlFormula,
    predicates: &[LinearPredicate],
    dim: usize,
) -> Result<(), MonitorError> {
    match f {
        StlFormula::Predicate(i) => {
            if *i >= predicates.len() {
                return Err(MonitorError::UnknownPredicate { index: *i, len: predicates.len() });
            }
            if predicates[*i].dim() != dim {
                return Err(MonitorError::BadSignal(format!(
                    "predicate {} has dimension {}, signal {}",
                    i,
                    predicates[*i].dim(),
                    dim
                )));
            }
            Ok(())
        }
        StlFormula::Not(c) => check_predicates(c, predicates, dim),
        StlFormula::Eventually(_, c) | StlFormula::Always(_, c) => {
            check_predicates(c, predicates, dim)
        }
        StlFormula::Until(_, l, r) => {
            check_predicates(l, predicates, dim)?;
            check_predicates(r, predicates, dim)
        }
        StlFormula::And(cs) | StlFormula::Or(cs) => {
            cs.iter().try_for_each(|c| check_predicates(c, predicates, dim))
        }
    }
}

fn predicted_evals(f: &StlFormula, dd: f64, ds: f64) -> f64 {
    let win = |iv: &Interval| (iv.b - iv.a) * (1.0 / dd + 1.0 / ds) + 2.0;
    match f {
        StlFormula::Predicate(_) => 1.0,
        StlFormula::Not(c) => predicted_evals(c, dd, ds),
        StlFormula::Eventually(iv, c) | StlFormula::Always(iv, c) => {
            win(iv) * predicted_evals(c, dd, ds)
        }
        StlFormula::Until(iv, l, r) => {
            let inner = iv.b * (1.0 / dd + 1.0 / ds) + 2.0;
            win(iv) * (predicted_evals(r, dd, ds) + inner * predicted_evals(l, dd, ds))
        }
        StlFormula::And(cs) | StlFormula::Or(cs) => {
            cs.iter().map(|c| predicted_evals(c, dd, ds)).sum()
        }
    }
}

// ---------------------------------------------------------------------------
// Direct recursion
// ---------------------------------------------------------------------------

/// Sample set for one window, per the contract in the module docs.
fn window_grid(sig: &SampledSignal, lo: f64, hi: f64, dd: f64) -> Vec<f64> {
    if hi <= lo {
        return vec![lo];
    }
    let n = ((hi - lo) / dd + 1e-9).floor() as usize;
    let mut pts = Vec::with_capacity(n + 2);
    for k in 0..=n {
        pts.push(lo + k as f64 * dd);
    }
    pts.push(hi);
    for k in sig.interior_knots(lo, hi) {
        pts.push(sig.times[k]);
    }
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    pts
}

fn eval_naive(
    f: &StlFormula,
    predicates: &[LinearPredicate],
    sig: &SampledSignal,
    t: f64,
    dd: f64,
) -> f64 {
    match f {
        StlFormula::Predicate(i) => predicate_value(&predicates[*i], &sig.value_at(t)),
        StlFormula::Not(c) => -eval_naive(c, predicates, sig, t, dd),
        StlFormula::Eventually(iv, c) => window_grid(sig, t + iv.a, t + iv.b, dd)
            .into_iter()
            .map(|tau| eval_naive(c, predicates, sig, tau, dd))
            .fold(f64::NEG_INFINITY, f64::max),
        StlFormula::Always(iv, c) => window_grid(sig, t + iv.a, t + iv.b, dd)
            .into_iter()
            .map(|tau| eval_naive(c, predicates, sig, tau, dd))
            .fold(f64::INFINITY, f64::min),
        StlFormula::Until(iv, l, r) => {
            let mut best = f64::NEG_INFINITY;
            for tau in window_grid(sig, t + iv.a, t + iv.b, dd) {
                let rr = eval_naive(r, predicates, sig, tau, dd);
                let held = window_grid(sig, t, tau, dd)
                    .into_iter()
                    .map(|s| eval_naive(l, predicates, sig, s, dd))
                    .fold(f64::INFINITY, f64::min);
                best = best.max(rr.min(held));
            }
            best
        }
        StlFormula::And(cs) => cs
            .iter()
            .map(|c| eval_naive(c, predicates, sig, t, dd))
            .fold(f64::INFINITY, f64::min),
        StlFormula::Or(cs) => cs
            .iter()
            .map(|c| eval_naive(c, predicates, sig, t, dd))
            .fold(f64::NEG_INFINITY, f64::max),
    }
}

// ---------------------------------------------------------------------------
// Sliding-window route over uniform knots
// ---------------------------------------------------------------------------

/// Formula shapes the grid route handles.
enum GridNode {
    Pred(usize),
    Unary { take_max: bool, steps: (usize, usize), pred: usize },
    Nested {
        outer_max: bool,
        outer_steps: (usize, usize),
        inner_max: bool,
        inner_steps: (usize, usize),
        pred: usize,
    },
    Bool { take_max: bool, children: Vec<GridNode> },
}

struct GridLayout {
    ds: f64,
    t_first: f64,
    len: usize,
}

impl GridLayout {
    /// Index of `t` on the knot grid, when it lands on one.
    fn index_of(&self, t: f64) -> Option<usize> {
        let k = ((t - self.t_first) / self.ds).round();
        if k < 0.0 || k as usize >= self.len {
            return None;
        }
        let tol = 1e-9 * t.abs().max(1.0);
        ((self.t_first + k * self.ds) - t).abs().le(&tol).then_some(k as usize)
    }

    /// Number of grid steps spanned by a window offset, when aligned.
    fn steps_of(&self, span: f64) -> Option<usize> {
        let k = (span / self.ds).round();
        if k < 0.0 {
            return None;
        }
        let tol = 1e-9 * span.abs().max(1.0);
        ((k * self.ds) - span).abs().le(&tol).then_some(k as usize)
    }
}

fn grid_eval(
    f: &StlFormula,
    predicates: &[LinearPredicate],
    sig: &SampledSignal,
    t0: f64,
    dd: f64,
) -> Option<f64> {
    let n = sig.times.len();
    let ds = (sig.end_time() - sig.start_time()) / (n - 1) as f64;
    if !(ds > 0.0) {
        return None;
    }
    let layout = GridLayout { ds, t_first: sig.start_time(), len: n };
    for (k, &t) in sig.times.iter().enumerate() {
        let tol = 1e-9 * t.abs().max(1.0);
        if ((layout.t_first + k as f64 * ds) - t).abs() > tol {
            return None;
        }
    }
    // Every contract sample must be a knot: the dense step has to be a whole
    // number of knot steps (the windows themselves are checked per node).
    layout.steps_of(dd).filter(|&q| q >= 1)?;
    let plan = build_plan(f, &layout)?;
    let j0 = layout.index_of(t0)?;
    let mut cache: Vec<Option<Vec<f64>>> = vec![None; predicates.len()];
    Some(eval_plan(&plan, predicates, sig, j0, &mut cache))
}

fn build_plan(f: &StlFormula, layout: &GridLayout) -> Option<GridNode> {
    match f {
        StlFormula::Predicate(i) => Some(GridNode::Pred(*i)),
        StlFormula::Eventually(iv, c) | StlFormula::Always(iv, c) => {
            let take_max = matches!(f, StlFormula::Eventually(..));
            let steps = (layout.steps_of(iv.a)?, layout.steps_of(iv.b)?);
            match c.as_ref() {
                StlFormula::Predicate(p) => {
                    Some(GridNode::Unary { take_max, steps, pred: *p })
                }
                StlFormula::Eventually(iv2, c2) | StlFormula::Always(iv2, c2) => {
                    let inner_max = matches!(c.as_ref(), StlFormula::Eventually(..));
                    let inner_steps = (layout.steps_of(iv2.a)?, layout.steps_of(iv2.b)?);
                    match c2.as_ref() {
                        StlFormula::Predicate(p) => Some(GridNode::Nested {
                            outer_max: take_max,
                            outer_steps: steps,
                            inner_max,
                            inner_steps,
                            pred: *p,
                        }),
                        _ => None,
                    }
                }
                _ => None,
            }
        }
        StlFormula::And(cs) | StlFormula::Or(cs) => {
            let take_max = matches!(f, StlFormula::Or(_));
            let children = cs
                .iter()
                .map(|c| build_plan(c, layout))
                .collect::<Option<Vec<_>>>()?;
            Some(GridNode::Bool { take_max, children })
        }
        _ => None,
    }
}

fn pred_profile<'a>(
    pred: usize,
    predicates: &[LinearPredicate],
    sig: &SampledSignal,
    cache: &'a mut Vec<Option<Vec<f64>>>,
) -> &'a [f64] {
    if cache[pred].is_none() {
        let h: Vec<f64> = sig
            .states
            .iter()
            .map(|x| predicate_value(&predicates[pred], x))
            .collect();
        cache[pred] = Some(h);
    }
    cache[pred].as_ref().unwrap()
}

fn eval_plan(
    node: &GridNode,
    predicates: &[LinearPredicate],
    sig: &SampledSignal,
    j0: usize,
    cache: &mut Vec<Option<Vec<f64>>>,
) -> f64 {
    match node {
        GridNode::Pred(p) => pred_profile(*p, predicates, sig, cache)[j0],
        GridNode::Unary { take_max, steps, pred } => {
            let h = pred_profile(*pred, predicates, sig, cache);
            let (lo, hi) = (j0 + steps.0, (j0 + steps.1).min(h.len() - 1));
            fold_extreme(&h[lo..=hi], *take_max)
        }
        GridNode::Nested { outer_max, outer_steps, inner_max, inner_steps, pred } => {
            let h = pred_profile(*pred, predicates, sig, cache);
            let first_lo = j0 + outer_steps.0 + inner_steps.0;
            let last_lo = j0 + outer_steps.1 + inner_steps.0;
            let win = inner_steps.1 - inner_steps.0;
            let inner = sliding_extreme(h, first_lo, last_lo, win, *inner_max);
            fold_extreme(&inner, *outer_max)
        }
        GridNode::Bool { take_max, children } => {
            let vals = children
                .iter()
                .map(|c| eval_plan(c, predicates, sig, j0, cache))
                .collect::<Vec<f64>>();
            fold_extreme(&vals, *take_max)
        }
    }
}

fn fold_extreme(vals: &[f64], take_max: bool) -> f64 {
    if take_max {
        vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    } else {
        vals.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

/// Extremum of `h` over windows `[lo, lo + win]` for `lo` in
/// `first_lo..=last_lo`, one monotone deque pass.
fn sliding_extreme(
    h: &[f64],
    first_lo: usize,
    last_lo: usize,
    win: usize,
    take_max: bool,
) -> Vec<f64> {
    let beats = |a: f64, b: f64| if take_max { a >= b } else { a <= b };
    let mut dq: VecDeque<usize> = VecDeque::new();
    let mut out = Vec::with_capacity(last_lo - first_lo + 1);
    let clamp = h.len() - 1;
    for lo in first_lo..=last_lo {
        let hi = (lo + win).min(clamp);
        if lo == first_lo {
            for j in lo..=hi {
                while dq.back().is_some_and(|&b| beats(h[j], h[b])) {
                    dq.pop_back();
                }
                dq.push_back(j);
            }
        } else {
            while dq.back().is_some_and(|&b| beats(h[hi], h[b])) {
                dq.pop_back();
            }
            dq.push_back(hi);
            while dq.front().is_some_and(|&f| f < lo) {
                dq.pop_front();
            }
        }
        out.push(h[dq[0]]);
    }
    out
}
