//! Time-consistent RRT* over the compiled tube.
//!
//! The tree lives in space-time: every node is a state paired with a knot
//! time on the uniform `dt` grid, the root is `(x0, 0)`, and every edge is a
//! short trajectory produced by a direct-transcription QP whose knots carry
//! the barrier rows of the tasks active there. Sampling draws a grid time
//! and a state uniform in the tube slice at that time; extensions connect
//! the nearest past node to the sample; rewiring bridges the new node to
//! nearby later nodes when that strictly shortens their path from the root.
//!
//! Costs are path lengths: the sum of knot-to-knot Euclidean state
//! distances along the edges back to the root.

use nalgebra::{DMatrix, DVector};
use rand::rngs::ChaCha8Rng;
use rand::{RngExt, SeedableRng};
use std::time::Instant;
use thiserror::Error;

use crate::barrier::{BarrierError, ConjunctionBarrier};
use crate::encoder::Dynamics;
use crate::geometry::{contains, sample_uniform, GeometryError, Polytope};
use crate::invariance::{discretize, InvarianceError, ZohModel};
use crate::solver::{Clarabel, ConvexProblem, ConvexSolve, Solved};

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error("bad planner parameters: {0}")]
    BadParams(String),
    #[error("start state is outside the tube slice at t = 0")]
    StartOutside,
    #[error("no node is eligible for the sampled time")]
    NoEligibleNode,
    #[error("rewiring {target} under {node} would form a cycle")]
    CycleWouldForm { node: usize, target: usize },
    #[error("no node reached the horizon within {iterations} iterations")]
    NoSolution { iterations: usize },
    #[error(transparent)]
    Barrier(#[from] BarrierError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Invariance(#[from] InvarianceError),
}

/// Why a steer or bridge attempt produced no edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeReject {
    /// The requested span is shorter than one grid step.
    ZeroDuration,
    /// The transcription QP has no feasible point (or the solve failed).
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct PlannerParams {
    /// State tracking weight in the steer objective, positive definite.
    pub q: DMatrix<f64>,
    /// Input weight, positive definite.
    pub r: DMatrix<f64>,
    /// Longest edge duration in seconds.
    pub delta_max: f64,
    /// Rewiring radius in the mixed space-time metric.
    pub eps_rewire: f64,
    /// Knot spacing; every node time is a multiple of this.
    pub dt: f64,
    /// Iteration budget.
    pub n_max: usize,
    /// Spacing of the dense membership and collision checks.
    pub collision_resolution: f64,
    /// Weight of the time gap in the nearest-neighbor metric.
    pub time_weight: f64,
    /// RNG seed for the sampling loop.
    pub seed: u64,
}

/// Piecewise-linear state path on a uniform knot grid with held inputs.
#[derive(Debug, Clone)]
pub struct Trajectory {
    times: Vec<f64>,
    states: Vec<DVector<f64>>,
    inputs: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn new(
        times: Vec<f64>,
        states: Vec<DVector<f64>>,
        inputs: Vec<DVector<f64>>,
    ) -> Result<Self, PlannerError> {
        if times.len() < 2 || times.len() != states.len() || inputs.len() + 1 != times.len() {
            return Err(PlannerError::BadParams(format!(
                "trajectory shape: {} times, {} states, {} inputs",
                times.len(),
                states.len(),
                inputs.len()
            )));
        }
        if !times.windows(2).all(|w| w[1] > w[0]) {
            return Err(PlannerError::BadParams(
                "trajectory knots must strictly increase".into(),
            ));
        }
        Ok(Self { times, states, inputs })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[DVector<f64>] {
        &self.states
    }

    pub fn inputs(&self) -> &[DVector<f64>] {
        &self.inputs
    }

    pub fn start_time(&self) -> f64 {
        self.times[0]
    }

    pub fn end_time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn end_state(&self) -> &DVector<f64> {
        self.states.last().unwrap()
    }

    /// Linear interpolation between knots, clamped at the ends.
    pub fn state_at(&self, t: f64) -> DVector<f64> {
        match self.times.binary_search_by(|v| v.partial_cmp(&t).unwrap()) {
            Ok(k) => self.states[k].clone(),
            Err(0) => self.states[0].clone(),
            Err(k) if k == self.times.len() => self.states[k - 1].clone(),
            Err(k) => {
                let s = (t - self.times[k - 1]) / (self.times[k] - self.times[k - 1]);
                (1.0 - s) * &self.states[k - 1] + s * &self.states[k]
            }
        }
    }

    /// Held input on the interval containing `t` (last interval at the end).
    pub fn input_at(&self, t: f64) -> DVector<f64> {
        let k = self.times.partition_point(|&v| v <= t).saturating_sub(1);
        self.inputs[k.min(self.inputs.len() - 1)].clone()
    }

    /// Sum of knot-to-knot Euclidean state distances.
    pub fn path_length(&self) -> f64 {
        self.states
            .windows(2)
            .map(|w| (&w[1] - &w[0]).norm())
            .sum()
    }

    /// Largest per-step gap between stored states and the exact hold model.
    pub fn max_dynamics_residual(&self, zoh: &ZohModel) -> f64 {
        self.states
            .windows(2)
            .zip(&self.inputs)
            .map(|(w, u)| (zoh.step(&w[0], u) - &w[1]).norm())
            .fold(0.0, f64::max)
    }

    /// Joins consecutive edges that share their endpoint knots.
    pub fn concatenate(parts: &[&Trajectory]) -> Result<Trajectory, PlannerError> {
        let first = parts
            .first()
            .ok_or_else(|| PlannerError::BadParams("nothing to concatenate".into()))?;
        let mut times = first.times.clone();
        let mut states = first.states.clone();
        let mut inputs = first.inputs.clone();
        for part in &parts[1..] {
            let t_last = *times.last().unwrap();
            if (part.times[0] - t_last).abs() > 1e-9 * t_last.abs().max(1.0) {
                return Err(PlannerError::BadParams(format!(
                    "edge starts at t = {}, previous ends at t = {}",
                    part.times[0], t_last
                )));
            }
            times.extend_from_slice(&part.times[1..]);
            states.extend(part.states[1..].iter().cloned());
            inputs.extend(part.inputs.iter().cloned());
        }
        Trajectory::new(times, states, inputs)
    }
}

#[derive(Debug, Clone)]
pub struct PlanNode {
    pub x: DVector<f64>,
    /// Knot index; the node time is `knot * dt` exactly.
    pub knot: usize,
    pub t: f64,
    pub parent: Option<usize>,
    /// Index into the edge list for the incoming trajectory.
    pub edge: Option<usize>,
    /// Path length from the root.
    pub cost: f64,
    children: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct PlanTree {
    pub nodes: Vec<PlanNode>,
    pub edges: Vec<Trajectory>,
    dt: f64,
}

impl PlanTree {
    pub fn new(x0: DVector<f64>, dt: f64) -> Self {
        let root = PlanNode {
            x: x0,
            knot: 0,
            t: 0.0,
            parent: None,
            edge: None,
            cost: 0.0,
            children: Vec::new(),
        };
        Self { nodes: vec![root], edges: Vec::new(), dt }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Appends a node reached from `parent` by `edge`.
    pub fn insert(&mut self, parent: usize, edge: Trajectory) -> usize {
        let id = self.nodes.len();
        let knot = (edge.end_time() / self.dt).round() as usize;
        let node = PlanNode {
            x: edge.end_state().clone(),
            knot,
            t: knot as f64 * self.dt,
            parent: Some(parent),
            edge: Some(self.edges.len()),
            cost: self.nodes[parent].cost + edge.path_length(),
            children: Vec::new(),
        };
        self.edges.push(edge);
        self.nodes.push(node);
        self.nodes[parent].children.push(id);
        id
    }

    /// True when `a` appears on the root path of `i`.
    pub fn is_ancestor(&self, a: usize, i: usize) -> bool {
        let mut cur = self.nodes[i].parent;
        while let Some(p) = cur {
            if p == a {
                return true;
            }
            cur = self.nodes[p].parent;
        }
        false
    }

    /// Node ids from the root to `i`, inclusive.
    pub fn root_path(&self, i: usize) -> Vec<usize> {
        let mut path = vec![i];
        let mut cur = self.nodes[i].parent;
        while let Some(p) = cur {
            path.push(p);
            cur = self.nodes[p].parent;
        }
        path.reverse();
        path
    }

    /// Reparents `r` under `j` when the bridge strictly lowers the cost of
    /// `r`; cost changes propagate through the whole subtree of `r`.
    pub fn rewire(
        &mut self,
        j: usize,
        r: usize,
        bridge_traj: Trajectory,
    ) -> Result<bool, PlannerError> {
        if j == r || self.is_ancestor(r, j) {
            return Err(PlannerError::CycleWouldForm { node: j, target: r });
        }
        let new_cost = self.nodes[j].cost + bridge_traj.path_length();
        if new_cost >= self.nodes[r].cost {
            return Ok(false);
        }
        let delta = new_cost - self.nodes[r].cost;
        let old_parent = self.nodes[r].parent.expect("only the root lacks a parent");
        self.nodes[old_parent].children.retain(|&c| c != r);
        let edge_slot = self.nodes[r].edge.expect("non-root nodes carry an edge");
        self.edges[edge_slot] = bridge_traj;
        self.nodes[r].parent = Some(j);
        self.nodes[j].children.push(r);
        let mut stack = vec![r];
        while let Some(i) = stack.pop() {
            self.nodes[i].cost += delta;
            stack.extend(self.nodes[i].children.iter().copied());
        }
        Ok(true)
    }

    /// Largest gap between cached costs and a from-scratch recomputation.
    pub fn audit_costs(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.nodes.len() {
            let fresh: f64 = self
                .root_path(i)
                .iter()
                .filter_map(|&k| self.nodes[k].edge)
                .map(|e| self.edges[e].path_length())
                .sum();
            worst = worst.max((fresh - self.nodes[i].cost).abs());
        }
        worst
    }
}

/// Space-time distance used for neighbor queries.
fn dist(node: &PlanNode, x: &DVector<f64>, t: f64, time_weight: f64) -> f64 {
    (x - &node.x).norm() + time_weight * (t - node.t).abs()
}

/// Nearest node at or before the sampled time; ties go to the lowest id.
pub fn past_nn(
    tree: &PlanTree,
    x: &DVector<f64>,
    knot: usize,
    time_weight: f64,
) -> Result<usize, PlannerError> {
    let t = knot as f64 * tree.dt;
    tree.nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| n.knot <= knot)
        .min_by(|(ia, a), (ib, b)| {
            dist(a, x, t, time_weight)
                .partial_cmp(&dist(b, x, t, time_weight))
                .unwrap()
                .then(ia.cmp(ib))
        })
        .map(|(i, _)| i)
        .ok_or(PlannerError::NoEligibleNode)
}

/// Later nodes inside the rewiring radius, nearest first, skipping the node
/// itself and its ancestors.
pub fn future_nns(tree: &PlanTree, j: usize, eps_rewire: f64, time_weight: f64) -> Vec<usize> {
    const CANDIDATE_CAP: usize = 25;
    let xj = tree.nodes[j].x.clone();
    let tj = tree.nodes[j].t;
    let mut found: Vec<(f64, usize)> = tree
        .nodes
        .iter()
        .enumerate()
        .filter(|&(r, n)| r != j && n.knot >= tree.nodes[j].knot && !tree.is_ancestor(r, j))
        .map(|(r, n)| (dist(n, &xj, tj, time_weight), r))
        .filter(|&(d, _)| d <= eps_rewire)
        .collect();
    found.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    found.truncate(CANDIDATE_CAP);
    found.into_iter().map(|(_, r)| r).collect()
}

/// Terminal condition of the transcription QP.
enum Goal<'a> {
    /// Track the sample everywhere; the end state is free.
    Track(&'a DVector<f64>),
    /// Pin the end state exactly (bridging).
    Pin(&'a DVector<f64>),
}

/// Direct transcription over `n_steps` grid intervals starting at
/// `from_knot`: decision variables are the states at knots 1..=N and the
/// held inputs, dynamics enter as exact hold equalities, and every knot
/// carries the input rows plus the tube rows active at its time.
fn transcribe(
    cb: &ConjunctionBarrier,
    dynamics: &Dynamics,
    zoh: &ZohModel,
    params: &PlannerParams,
    from_x: &DVector<f64>,
    from_knot: usize,
    n_steps: usize,
    goal: Goal<'_>,
    qp: &dyn ConvexSolve,
) -> Result<Trajectory, EdgeReject> {
    let (n, m) = (dynamics.n(), dynamics.m());
    let xi = |k: usize, i: usize| (k - 1) * n + i;
    let ui = |k: usize, i: usize| n_steps * n + k * m + i;
    let mut prob = ConvexProblem::new(n_steps * (n + m));

    for k in 0..n_steps {
        for i in 0..n {
            let mut row: Vec<(usize, f64)> = vec![(xi(k + 1, i), 1.0)];
            let mut rhs = zoh.pd[i];
            if k == 0 {
                rhs += zoh.ad.row(i).transpose().dot(from_x);
            } else {
                for j in 0..n {
                    row.push((xi(k, j), -zoh.ad[(i, j)]));
                }
            }
            for j in 0..m {
                row.push((ui(k, j), -zoh.bd[(i, j)]));
            }
            prob.add_eq_row(&row, rhs);
        }
    }

    let (ua, ub) = (dynamics.input_set.a(), dynamics.input_set.b());
    for k in 0..n_steps {
        for row in 0..ua.nrows() {
            let cols: Vec<(usize, f64)> =
                (0..m).map(|j| (ui(k, j), ua[(row, j)])).collect();
            prob.add_ineq_row(&cols, ub[row]);
        }
    }

    for k in 1..=n_steps {
        let t_k = (from_knot + k) as f64 * params.dt;
        let slice = cb.rows_closed_at(t_k).map_err(|_| EdgeReject::Infeasible)?;
        let (sa, sb) = (slice.a(), slice.b());
        for row in 0..sa.nrows() {
            let cols: Vec<(usize, f64)> =
                (0..n).map(|j| (xi(k, j), sa[(row, j)])).collect();
            prob.add_ineq_row(&cols, sb[row]);
        }
    }

    // Both goals track a reference state: the sample when steering, the
    // pinned endpoint when bridging (so a stationary bridge is optimal).
    let x_ref: &DVector<f64> = match goal {
        Goal::Track(x) => x,
        Goal::Pin(x_end) => {
            for i in 0..n {
                prob.add_eq_row(&[(xi(n_steps, i), 1.0)], x_end[i]);
            }
            x_end
        }
    };
    for k in 1..=n_steps {
        for i in 0..n {
            for j in i..n {
                let w = if i == j { params.q[(i, j)] } else { 2.0 * params.q[(i, j)] };
                prob.add_quad(xi(k, i), xi(k, j), w * params.dt);
            }
            let pull: f64 = (0..n).map(|j| params.q[(i, j)] * x_ref[j]).sum();
            prob.add_linear(xi(k, i), -2.0 * pull * params.dt);
        }
    }
    for k in 0..n_steps {
        for i in 0..m {
            for j in i..m {
                let w = if i == j { params.r[(i, j)] } else { 2.0 * params.r[(i, j)] };
                prob.add_quad(ui(k, i), ui(k, j), w * params.dt);
            }
        }
    }

    let sol = match qp.solve(&prob) {
        Ok(Solved::Optimal { x, .. }) => x,
        Ok(Solved::Infeasible) | Err(_) => return Err(EdgeReject::Infeasible),
    };

    // Re-simulate from the solved inputs so the stored states satisfy the
    // hold model exactly rather than to solver tolerance.
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut inputs = Vec::with_capacity(n_steps);
    times.push(from_knot as f64 * params.dt);
    states.push(from_x.clone());
    for k in 0..n_steps {
        let u = DVector::from_fn(m, |i, _| sol[ui(k, i)]);
        let next = zoh.step(states.last().unwrap(), &u);
        times.push((from_knot + k + 1) as f64 * params.dt);
        states.push(next);
        inputs.push(u);
    }
    Ok(Trajectory { times, states, inputs })
}

/// Edge toward a sample: spans `min(t_sample - t_from, delta_max)` rounded
/// down to whole grid steps, with the end state free.
pub fn steer(
    cb: &ConjunctionBarrier,
    dynamics: &Dynamics,
    zoh: &ZohModel,
    params: &PlannerParams,
    from_x: &DVector<f64>,
    from_knot: usize,
    x_sample: &DVector<f64>,
    sample_knot: usize,
    qp: &dyn ConvexSolve,
) -> Result<Trajectory, EdgeReject> {
    if sample_knot <= from_knot {
        return Err(EdgeReject::ZeroDuration);
    }
    let cap = (params.delta_max / params.dt + 1e-9).floor() as usize;
    let n_steps = (sample_knot - from_knot).min(cap.max(1));
    transcribe(
        cb,
        dynamics,
        zoh,
        params,
        from_x,
        from_knot,
        n_steps,
        Goal::Track(x_sample),
        qp,
    )
}

/// Edge between two existing nodes with both endpoints pinned.
pub fn bridge(
    cb: &ConjunctionBarrier,
    dynamics: &Dynamics,
    zoh: &ZohModel,
    params: &PlannerParams,
    from_x: &DVector<f64>,
    from_knot: usize,
    to_x: &DVector<f64>,
    to_knot: usize,
    qp: &dyn ConvexSolve,
) -> Result<Trajectory, EdgeReject> {
    if to_knot <= from_knot {
        return Err(EdgeReject::ZeroDuration);
    }
    transcribe(
        cb,
        dynamics,
        zoh,
        params,
        from_x,
        from_knot,
        to_knot - from_knot,
        Goal::Pin(to_x),
        qp,
    )
}

/// Sample times of a trajectory at the given resolution, knots included.
fn dense_times(traj: &Trajectory, resolution: f64) -> Vec<f64> {
    let mut ts = Vec::new();
    for w in traj.times.windows(2) {
        ts.push(w[0]);
        let gap = w[1] - w[0];
        let pieces = (gap / resolution - 1e-9).ceil().max(1.0) as usize;
        for j in 1..pieces {
            ts.push(w[0] + gap * j as f64 / pieces as f64);
        }
    }
    ts.push(*traj.times.last().unwrap());
    ts
}

/// True when no sampled point of the interpolated trajectory lies inside
/// any obstacle.
pub fn collision_free(traj: &Trajectory, obstacles: &[Polytope], resolution: f64) -> bool {
    if obstacles.is_empty() {
        return true;
    }
    dense_times(traj, resolution).into_iter().all(|t| {
        let x = traj.state_at(t);
        obstacles.iter().all(|ob| !contains(ob, &x, 0.0))
    })
}

/// True when every sampled point stays inside the tube slice at its time.
fn tube_membership(
    cb: &ConjunctionBarrier,
    traj: &Trajectory,
    resolution: f64,
    tol: f64,
) -> Result<bool, PlannerError> {
    for t in dense_times(traj, resolution) {
        let slice = cb.rows_closed_at(t)?;
        if !contains(&slice, &traj.state_at(t), tol) {
            return Ok(false);
        }
    }
    Ok(true)
}

#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct PlanStats {
    pub iterations: usize,
    pub nodes: usize,
    pub steer_infeasible: usize,
    pub zero_duration: usize,
    pub membership_rejections: usize,
    pub collision_rejections: usize,
    pub bridge_attempts: usize,
    pub bridge_infeasible: usize,
    pub bridge_gate_rejections: usize,
    pub rewires: usize,
    pub cycle_guards: usize,
    pub first_iteration: Option<usize>,
    pub first_cost: Option<f64>,
    pub best_cost: Option<f64>,
    pub first_wall_seconds: Option<f64>,
    pub best_wall_seconds: Option<f64>,
    pub total_wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct PlanOutcome {
    pub trajectory: Trajectory,
    pub goal_node: usize,
    pub tree: PlanTree,
    pub stats: PlanStats,
}

const MEMBERSHIP_TOL: f64 = 1e-7;

fn validate(
    dynamics: &Dynamics,
    params: &PlannerParams,
    t_horizon: f64,
) -> Result<usize, PlannerError> {
    let bad = |m: String| Err(PlannerError::BadParams(m));
    let (n, m) = (dynamics.n(), dynamics.m());
    if params.q.nrows() != n || params.q.ncols() != n {
        return bad(format!("Q must be {n}x{n}"));
    }
    if params.r.nrows() != m || params.r.ncols() != m {
        return bad(format!("R must be {m}x{m}"));
    }
    for (name, w) in [("Q", &params.q), ("R", &params.r)] {
        if nalgebra::Cholesky::new(w.clone()).is_none() {
            return bad(format!("{name} must be positive definite"));
        }
    }
    if !(params.dt > 0.0) {
        return bad(format!("dt must be positive, got {}", params.dt));
    }
    if params.delta_max < params.dt {
        return bad(format!(
            "delta_max {} is below one grid step {}",
            params.delta_max, params.dt
        ));
    }
    if !(params.eps_rewire > 0.0) || !(params.collision_resolution > 0.0) {
        return bad("eps_rewire and collision_resolution must be positive".into());
    }
    if params.time_weight < 0.0 {
        return bad("time_weight must be nonnegative".into());
    }
    if params.n_max == 0 {
        return bad("n_max must be at least 1".into());
    }
    let k_max = (t_horizon / params.dt).round();
    if k_max < 1.0 || (k_max * params.dt - t_horizon).abs() > 1e-9 * t_horizon.abs().max(1.0) {
        return bad(format!(
            "the horizon {} must be a whole number of dt = {} steps",
            t_horizon, params.dt
        ));
    }
    Ok(k_max as usize)
}

/// Grows the tree for `n_max` iterations and extracts the cheapest root
/// path that reaches the horizon.
pub fn plan(
    cb: &ConjunctionBarrier,
    dynamics: &Dynamics,
    obstacles: &[Polytope],
    x0: &DVector<f64>,
    t_horizon: f64,
    params: &PlannerParams,
) -> Result<PlanOutcome, PlannerError> {
    let clock = Instant::now();
    let k_max = validate(dynamics, params, t_horizon)?;
    if !contains(&cb.set_at(0.0)?, x0, MEMBERSHIP_TOL) {
        return Err(PlannerError::StartOutside);
    }
    let zoh = discretize(dynamics, params.dt)?;
    let qp = Clarabel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut tree = PlanTree::new(x0.clone(), params.dt);
    let mut stats = PlanStats::default();
    let mut slices: Vec<Option<Polytope>> = vec![None; k_max + 1];
    let goal_knot = k_max;
    let mut goal_nodes: Vec<usize> = Vec::new();

    for it in 1..=params.n_max {
        stats.iterations = it;
        let k_sample = rng.random_range(1..=k_max);
        let t_sample = k_sample as f64 * params.dt;
        if slices[k_sample].is_none() {
            slices[k_sample] = Some(cb.set_at(t_sample)?);
        }
        let x_sample = sample_uniform(slices[k_sample].as_ref().unwrap(), &mut rng)?;
        let near = past_nn(&tree, &x_sample, k_sample, params.time_weight)?;
        let edge = match steer(
            cb,
            dynamics,
            &zoh,
            params,
            &tree.nodes[near].x.clone(),
            tree.nodes[near].knot,
            &x_sample,
            k_sample,
            &qp,
        ) {
            Ok(e) => e,
            Err(EdgeReject::ZeroDuration) => {
                stats.zero_duration += 1;
                continue;
            }
            Err(EdgeReject::Infeasible) => {
                stats.steer_infeasible += 1;
                continue;
            }
        };
        if !tube_membership(cb, &edge, params.collision_resolution, MEMBERSHIP_TOL)? {
            stats.membership_rejections += 1;
            continue;
        }
        if !collision_free(&edge, obstacles, params.collision_resolution) {
            stats.collision_rejections += 1;
            continue;
        }
        let j = tree.insert(near, edge);
        if tree.nodes[j].knot >= goal_knot {
            goal_nodes.push(j);
            if stats.first_cost.is_none() {
                stats.first_iteration = Some(it);
                stats.first_cost = Some(tree.nodes[j].cost);
                stats.first_wall_seconds = Some(clock.elapsed().as_secs_f64());
            }
        }

        for r in future_nns(&tree, j, params.eps_rewire, params.time_weight) {
            if tree.nodes[r].knot == tree.nodes[j].knot {
                continue;
            }
            let lower_bound = tree.nodes[j].cost + (&tree.nodes[r].x - &tree.nodes[j].x).norm();
            if lower_bound >= tree.nodes[r].cost {
                continue;
            }
            stats.bridge_attempts += 1;
            let link = match bridge(
                cb,
                dynamics,
                &zoh,
                params,
                &tree.nodes[j].x.clone(),
                tree.nodes[j].knot,
                &tree.nodes[r].x.clone(),
                tree.nodes[r].knot,
                &qp,
            ) {
                Ok(e) => e,
                Err(_) => {
                    stats.bridge_infeasible += 1;
                    continue;
                }
            };
            if !tube_membership(cb, &link, params.collision_resolution, MEMBERSHIP_TOL)?
                || !collision_free(&link, obstacles, params.collision_resolution)
            {
                stats.bridge_gate_rejections += 1;
                continue;
            }
            match tree.rewire(j, r, link) {
                Ok(true) => stats.rewires += 1,
                Ok(false) => {}
                Err(PlannerError::CycleWouldForm { .. }) => stats.cycle_guards += 1,
                Err(other) => return Err(other),
            }
        }

        if let Some(&best) = goal_nodes
            .iter()
            .min_by(|&&a, &&b| tree.nodes[a].cost.partial_cmp(&tree.nodes[b].cost).unwrap())
        {
            let cost = tree.nodes[best].cost;
            if stats.best_cost.map_or(true, |c| cost < c) {
                stats.best_cost = Some(cost);
                stats.best_wall_seconds = Some(clock.elapsed().as_secs_f64());
            }
        }

        #[cfg(debug_assertions)]
        if it % 100 == 0 {
            debug_assert!(tree.audit_costs() <= 1e-6, "cost cache drifted");
        }
    }

    stats.nodes = tree.len();
    stats.total_wall_seconds = clock.elapsed().as_secs_f64();
    let goal = goal_nodes
        .iter()
        .copied()
        .min_by(|&a, &b| {
            tree.nodes[a]
                .cost
                .partial_cmp(&tree.nodes[b].cost)
                .unwrap()
                .then(a.cmp(&b))
        })
        .ok_or(PlannerError::NoSolution { iterations: params.n_max })?;
    let parts: Vec<&Trajectory> = tree
        .root_path(goal)
        .iter()
        .filter_map(|&i| tree.nodes[i].edge)
        .map(|e| &tree.edges[e])
        .collect();
    let trajectory = Trajectory::concatenate(&parts)?;
    Ok(PlanOutcome { trajectory, goal_node: goal, tree, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::barrier::make_task_barrier;
    use crate::formula::{AtomicTask, Interval, TaskKind};
    use crate::geometry::LinearPredicate;
    use crate::monitor::{robustness, SampledSignal};
    use crate::formula::StlFormula;
    use approx::assert_relative_eq;
    use nalgebra::dvector;

    fn drift_free(dim: usize, x_half: f64, u_half: f64) -> Dynamics {
        Dynamics::new(
            DMatrix::zeros(dim, dim),
            DMatrix::identity(dim, dim),
            DVector::zeros(dim),
            Polytope::axis_box(&vec![-x_half; dim], &vec![x_half; dim]).unwrap(),
            Polytope::axis_box(&vec![-u_half; dim], &vec![u_half; dim]).unwrap(),
        )
        .unwrap()
    }

    fn default_params(dim: usize) -> PlannerParams {
        PlannerParams {
            q: DMatrix::identity(dim, dim),
            r: DMatrix::identity(dim, dim) * 0.1,
            delta_max: 1.0,
            eps_rewire: 2.0,
            dt: 0.25,
            n_max: 150,
            collision_resolution: 0.0625,
            time_weight: 1.0,
            seed: 7,
        }
    }

    fn empty_tube(dim: usize, half: f64) -> ConjunctionBarrier {
        ConjunctionBarrier::new(
            Vec::new(),
            Polytope::axis_box(&vec![-half; dim], &vec![half; dim]).unwrap(),
        )
        .unwrap()
    }

    /// Stay-in-box task on [0, horizon] bound to a fixed margin.
    fn hold_tube(dim: usize, half: f64, box_half: f64, horizon: f64, r: f64) -> ConjunctionBarrier {
        let pred = LinearPredicate::box_predicate(&vec![-box_half; dim], &vec![box_half; dim]);
        let task = AtomicTask {
            kind: TaskKind::Always,
            outer: Interval::new(0.0, horizon).unwrap(),
            inner: None,
            predicate: 0,
        };
        let mut tb = make_task_barrier(&task, &pred, None).unwrap();
        tb.bind(0.0, r);
        ConjunctionBarrier::new(
            vec![tb],
            Polytope::axis_box(&vec![-half; dim], &vec![half; dim]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn past_nn_respects_the_time_filter_and_ties() {
        let line = |to: DVector<f64>, t1: f64| {
            let u = &to / t1;
            Trajectory::new(vec![0.0, t1], vec![dvector![0.0, 0.0], to], vec![u]).unwrap()
        };
        let mut tree = PlanTree::new(dvector![0.0, 0.0], 0.25);
        tree.insert(0, line(dvector![1.0, 0.0], 1.0));
        tree.insert(0, line(dvector![0.0, 1.0], 1.0));
        // Node 3 sits on the sample but two seconds later.
        tree.insert(0, line(dvector![0.4, 0.4], 3.0));
        let pick = past_nn(&tree, &dvector![0.4, 0.4], 4, 1.0).unwrap();
        assert!(tree.nodes[pick].knot <= 4, "picked a future node");
        // Nodes 1 and 2 tie in the metric: the lower id wins.
        assert_eq!(pick, 1);
        let pick0 = past_nn(&tree, &dvector![0.0, 0.0], 0, 1.0).unwrap();
        assert_eq!(pick0, 0);
    }

    #[test]
    fn steer_toward_the_current_state_holds_still() {
        let dyn2 = drift_free(2, 10.0, 2.0);
        let zoh = discretize(&dyn2, 0.25).unwrap();
        let params = default_params(2);
        let cb = empty_tube(2, 10.0);
        let from = dvector![0.5, -0.25];
        let traj = steer(
            &cb,
            &dyn2,
            &zoh,
            &params,
            &from,
            0,
            &from,
            4,
            &Clarabel::default(),
        )
        .unwrap();
        for x in traj.states() {
            assert_relative_eq!((x - &from).norm(), 0.0, epsilon = 1e-6);
        }
        for u in traj.inputs() {
            assert!(u.norm() < 1e-6);
        }
    }

    #[test]
    fn steer_duration_is_capped_by_delta_max() {
        let dyn1 = drift_free(1, 10.0, 2.0);
        let params = PlannerParams { delta_max: 2.0, dt: 1.0, ..default_params(1) };
        let zoh = discretize(&dyn1, 1.0).unwrap();
        let cb = empty_tube(1, 10.0);
        let traj = steer(
            &cb,
            &dyn1,
            &zoh,
            &params,
            &dvector![0.0],
            0,
            &dvector![5.0],
            9,
            &Clarabel::default(),
        )
        .unwrap();
        assert_eq!(traj.end_time(), 2.0);
        assert!(traj.max_dynamics_residual(&zoh) <= 1e-8);
    }

    #[test]
    fn steer_makes_strict_progress_toward_a_reachable_sample() {
        let dyn2 = drift_free(2, 10.0, 2.0);
        let zoh = discretize(&dyn2, 0.25).unwrap();
        let params = default_params(2);
        let cb = empty_tube(2, 10.0);
        let from = dvector![0.0, 0.0];
        let target = dvector![1.5, -1.0];
        let traj = steer(
            &cb,
            &dyn2,
            &zoh,
            &params,
            &from,
            0,
            &target,
            4,
            &Clarabel::default(),
        )
        .unwrap();
        let before = (&from - &target).norm();
        let after = (traj.end_state() - &target).norm();
        assert!(after < before, "no progress: {after} vs {before}");
    }

    #[test]
    fn collision_checks_catch_a_mid_segment_crossing() {
        let ob = Polytope::axis_box(&[0.4, -0.1], &[0.6, 0.1]).unwrap();
        let through = Trajectory::new(
            vec![0.0, 1.0],
            vec![dvector![0.0, 0.0], dvector![1.0, 0.0]],
            vec![dvector![1.0, 0.0]],
        )
        .unwrap();
        assert!(!collision_free(&through, &[ob.clone()], 0.25));
        assert!(collision_free(&through, &[], 0.25));
        let above = Trajectory::new(
            vec![0.0, 1.0],
            vec![dvector![0.0, 0.5], dvector![1.0, 0.5]],
            vec![dvector![1.0, 0.0]],
        )
        .unwrap();
        assert!(collision_free(&above, &[ob], 0.25));
    }

    #[test]
    fn future_neighbors_skip_self_ancestors_and_early_nodes() {
        let dyn1 = drift_free(1, 10.0, 2.0);
        let zoh = discretize(&dyn1, 0.25).unwrap();
        let params = default_params(1);
        let cb = empty_tube(1, 10.0);
        let qp = Clarabel::default();
        let mut tree = PlanTree::new(dvector![0.0], 0.25);
        let e1 = steer(&cb, &dyn1, &zoh, &params, &dvector![0.0], 0, &dvector![0.2], 2, &qp)
            .unwrap();
        let n1 = tree.insert(0, e1);
        let e2 = steer(
            &cb, &dyn1, &zoh, &params, &tree.nodes[n1].x.clone(), 2, &dvector![0.4], 4, &qp,
        )
        .unwrap();
        let n2 = tree.insert(n1, e2);
        let nns = future_nns(&tree, n2, 10.0, 1.0);
        assert!(nns.is_empty(), "ancestors and self must be excluded: {nns:?}");
        let nns1 = future_nns(&tree, n1, 10.0, 1.0);
        assert_eq!(nns1, vec![n2]);
    }

    #[test]
    fn bridge_rejects_an_unreachable_endpoint() {
        let dyn1 = drift_free(1, 10.0, 1.0);
        let zoh = discretize(&dyn1, 0.25).unwrap();
        let params = default_params(1);
        let cb = empty_tube(1, 10.0);
        // One step of 0.25 s at |u| <= 1 moves at most 0.25.
        let out = bridge(
            &cb,
            &dyn1,
            &zoh,
            &params,
            &dvector![0.0],
            0,
            &dvector![3.0],
            1,
            &Clarabel::default(),
        );
        assert!(matches!(out, Err(EdgeReject::Infeasible)));
        let hold = bridge(
            &cb,
            &dyn1,
            &zoh,
            &params,
            &dvector![0.5],
            0,
            &dvector![0.5],
            2,
            &Clarabel::default(),
        )
        .unwrap();
        assert!(hold.inputs().iter().all(|u| u.norm() < 1e-6));
    }

    #[test]
    fn rewire_reparents_only_on_strict_improvement() {
        let mk = |a: f64, b: f64, t0: f64| {
            Trajectory::new(
                vec![t0, t0 + 1.0],
                vec![dvector![a], dvector![b]],
                vec![dvector![b - a]],
            )
            .unwrap()
        };
        let mut tree = PlanTree::new(dvector![0.0], 1.0);
        // The original path overshoots to 5 before coming back to 4.
        let a = tree.insert(0, mk(0.0, 5.0, 0.0));
        let b = tree.insert(a, mk(5.0, 4.0, 1.0));
        let c = tree.insert(0, mk(0.0, 3.9, 0.0));
        assert_relative_eq!(tree.nodes[b].cost, 6.0);
        // Bridging c -> b costs 0.1 for a total of 4.0, beating 6.0.
        let cheap = mk(3.9, 4.0, 1.0);
        assert!(tree.rewire(c, b, cheap).unwrap());
        assert_eq!(tree.nodes[b].parent, Some(c));
        assert_relative_eq!(tree.nodes[b].cost, 4.0);
        assert!(tree.audit_costs() <= 1e-12);
        // A non-improving alternative is a no-op.
        let worse = mk(5.0, 4.0, 1.0);
        assert!(!tree.rewire(a, b, worse).unwrap());
        assert_eq!(tree.nodes[b].parent, Some(c));
        // Reparenting an ancestor under its descendant must be refused.
        let cyc = tree.rewire(b, c, mk(4.0, 3.9, 2.0));
        assert!(matches!(cyc, Err(PlannerError::CycleWouldForm { .. })));
    }

    #[test]
    fn rewire_updates_descendant_costs() {
        let mk = |a: f64, b: f64, t0: f64| {
            Trajectory::new(
                vec![t0, t0 + 1.0],
                vec![dvector![a], dvector![b]],
                vec![dvector![b - a]],
            )
            .unwrap()
        };
        let mut tree = PlanTree::new(dvector![0.0], 1.0);
        // Wasteful original path: out to 3.0, back to 2.5, then to 2.6.
        let a = tree.insert(0, mk(0.0, 3.0, 0.0));
        let b = tree.insert(a, mk(3.0, 2.5, 1.0));
        let leaf = tree.insert(b, mk(2.5, 2.6, 2.0));
        assert_relative_eq!(tree.nodes[leaf].cost, 3.6, epsilon = 1e-12);
        let shortcut = tree.insert(0, mk(0.0, 2.4, 0.0));
        assert!(tree.rewire(shortcut, b, mk(2.4, 2.5, 1.0)).unwrap());
        assert_relative_eq!(tree.nodes[b].cost, 2.5, epsilon = 1e-12);
        assert_relative_eq!(tree.nodes[leaf].cost, 2.6, epsilon = 1e-12);
        assert!(tree.audit_costs() <= 1e-12);
    }

    #[test]
    fn planning_a_hold_task_passes_the_monitor() {
        let dim = 2;
        let dyn2 = drift_free(dim, 5.0, 2.0);
        let r_star = 0.4;
        let cb = hold_tube(dim, 5.0, 1.0, 2.0, r_star);
        let params = default_params(dim);
        let x0 = dvector![0.3, -0.2];
        let out = plan(&cb, &dyn2, &[], &x0, 2.0, &params).unwrap();
        assert!(out.stats.first_cost.is_some());
        assert!(out.stats.best_cost.unwrap() <= out.stats.first_cost.unwrap() + 1e-12);
        assert!(out.tree.audit_costs() <= 1e-9);
        assert_eq!(out.trajectory.start_time(), 0.0);
        assert_relative_eq!(out.trajectory.end_time(), 2.0, epsilon = 1e-12);

        let pred = LinearPredicate::box_predicate(&[-1.0, -1.0], &[1.0, 1.0]);
        let sig = SampledSignal::new(
            out.trajectory.times().to_vec(),
            out.trajectory.states().to_vec(),
        )
        .unwrap();
        let phi = StlFormula::Always(
            Interval::new(0.0, 2.0).unwrap(),
            Box::new(StlFormula::Predicate(0)),
        );
        let rho = robustness(&phi, &[pred], &sig, 0.0, params.dt / 2.0).unwrap();
        assert!(rho >= r_star - 1e-3, "rho = {rho}");
    }

    #[test]
    fn planning_is_deterministic_for_a_fixed_seed() {
        let dyn2 = drift_free(2, 5.0, 2.0);
        let cb = hold_tube(2, 5.0, 1.5, 2.0, 0.2);
        let params = default_params(2);
        let x0 = dvector![0.0, 0.0];
        let a = plan(&cb, &dyn2, &[], &x0, 2.0, &params).unwrap();
        let b = plan(&cb, &dyn2, &[], &x0, 2.0, &params).unwrap();
        assert_eq!(a.tree.len(), b.tree.len());
        assert_eq!(a.stats.best_cost, b.stats.best_cost);
        assert_eq!(a.trajectory.states(), b.trajectory.states());
    }

    #[test]
    fn more_iterations_never_worsen_the_best_cost() {
        let dyn2 = drift_free(2, 5.0, 2.0);
        let cb = hold_tube(2, 5.0, 1.5, 2.0, 0.2);
        let x0 = dvector![0.4, 0.4];
        let short = plan(
            &cb,
            &dyn2,
            &[],
            &x0,
            2.0,
            &PlannerParams { n_max: 80, ..default_params(2) },
        )
        .unwrap();
        let long = plan(
            &cb,
            &dyn2,
            &[],
            &x0,
            2.0,
            &PlannerParams { n_max: 200, ..default_params(2) },
        )
        .unwrap();
        assert!(long.stats.best_cost.unwrap() <= short.stats.best_cost.unwrap() + 1e-12);
    }

    #[test]
    fn unreachable_horizon_reports_no_solution() {
        let dyn2 = drift_free(2, 5.0, 2.0);
        let cb = empty_tube(2, 5.0);
        let params = PlannerParams { n_max: 3, delta_max: 0.25, ..default_params(2) };
        let out = plan(&cb, &dyn2, &[], &dvector![0.0, 0.0], 10.0, &params);
        assert!(matches!(out, Err(PlannerError::NoSolution { iterations: 3 })));
    }

    #[test]
    fn start_outside_the_tube_is_rejected() {
        let dyn2 = drift_free(2, 5.0, 2.0);
        let cb = hold_tube(2, 5.0, 1.0, 2.0, 0.4);
        let out = plan(&cb, &dyn2, &[], &dvector![3.0, 0.0], 2.0, &default_params(2));
        assert!(matches!(out, Err(PlannerError::StartOutside)));
    }

    #[test]
    fn obstacles_shape_the_planned_path() {
        let dyn2 = drift_free(2, 5.0, 2.0);
        let cb = empty_tube(2, 5.0);
        let wall = Polytope::axis_box(&[-0.2, -2.0], &[0.2, 2.0]).unwrap();
        let params = PlannerParams { n_max: 250, ..default_params(2) };
        let out = plan(&cb, &dyn2, &[wall.clone()], &dvector![-1.0, 0.0], 2.0, &params).unwrap();
        assert!(collision_free(&out.trajectory, &[wall], params.collision_resolution / 4.0));
    }
}
