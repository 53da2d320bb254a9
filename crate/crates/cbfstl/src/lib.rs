//! Compiles fragment STL specifications into forward-invariant time-varying
//! polyhedral sets and plans trajectories through them.
//!
//! The pipeline has four stages, mirrored by the CLI subcommands:
//!
//! 1. [`formula`] parses a task specification such as
//!    `F[2,46] room_a & G[0,84] hall` and normalises it into a disjunction of
//!    conjunctions of timed reach/hold tasks.
//! 2. [`barrier`] and [`encoder`] attach a piecewise-linear time offset to
//!    every task predicate and solve one linear program per disjunct over the
//!    offset parameters, so that the resulting time-varying polyhedron is
//!    nonempty, viable across deadlines, and renderable forward invariant by
//!    an admissible input at every state-set vertex.
//! 3. [`invariance`] turns the compiled sets into a minimum-norm barrier
//!    controller (a small QP per step) and closed-loop rollouts.
//! 4. [`planner`] grows a time-parameterised RRT* whose edges are short
//!    direct-transcription QPs, keeping every knot inside the compiled sets
//!    and rewiring for monotonically improving path cost.
//!
//! [`monitor`] is an independent robustness semantics for the same formulas,
//! used to cross-check everything the compiler claims: a trajectory accepted
//! by the pipeline must score a robustness no worse than the encoded margin.
//!
//! The [`cli`] module wires the stages to JSON scenario files and CSV
//! trajectory artifacts; the `cbfstl` binary is a thin wrapper around it.

pub mod barrier;
pub mod cli;
pub mod encoder;
pub mod formula;
pub mod geometry;
pub mod invariance;
pub mod monitor;
pub mod planner;
pub mod solver;

pub use barrier::{ConjunctionBarrier, TaskBarrier};
pub use cli::{load_scenario, run_pipeline, Command, Scenario};
pub use encoder::{encode_disjunction, Dynamics, EncodingResult, LpLayout};
pub use formula::{
    collapse_same_operator, decompose_gf, horizon, parse, to_conjunctions, AtomicTask, Interval,
    StlFormula, TaskKind,
};
pub use geometry::{contains, enumerate_vertices, sample_uniform, LinearPredicate, Polytope};
pub use invariance::{cbf_qp_control, discretize, rollout, ClassKGain, ZohModel};
pub use monitor::{robustness, EvalRoute, SampledSignal};
pub use planner::{plan, PlanOutcome, PlanStats, PlanTree, PlannerParams, Trajectory};
pub use solver::{Clarabel, ConvexProblem, ConvexSolve, DenseLdp, Solved};
