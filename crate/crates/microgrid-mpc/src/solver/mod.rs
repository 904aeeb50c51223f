//! Embedded mixed-binary convex QP solver.
//!
//! `qp` holds the operator-splitting engine for the continuous relaxations;
//! `bnb` wraps it in a best-bound branch-and-bound over the binary
//! variables. The KKT factorization is computed once per problem and shared
//! across all tree nodes, since fixing a binary only pinches its box row.

mod bnb;
mod qp;

pub use bnb::{branch_and_bound, exhaustive_solve, solve_convex_qp, BnbOptions};
pub use qp::{QpOptions, QpSolution, QpSolver, QpStatus};

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("exhaustive enumeration limited to 16 binaries, problem has {0}")]
    TooManyBinaries(usize),
    #[error("quadratic term is not positive semidefinite after regularization")]
    BadQuadraticTerm,
}

/// Outcome of a mixed-binary solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    /// Incumbent proven optimal within the configured gap.
    Optimal,
    /// No feasible point exists (certificate from the QP engine or an
    /// exhausted tree without incumbent).
    Infeasible,
    /// Node or iteration budget hit with a feasible incumbent but an
    /// unproven gap.
    GapLimit,
    /// The continuous engine hit its iteration cap.
    IterationLimit,
    /// Objective unbounded below (dual infeasibility certificate).
    Unbounded,
}

impl SolveStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::GapLimit => "gap_limit",
            SolveStatus::IterationLimit => "iteration_limit",
            SolveStatus::Unbounded => "unbounded",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub status: SolveStatus,
    /// Primal point (incumbent for mixed-binary solves).
    pub z: Vec<f64>,
    pub objective: f64,
    /// Proven lower bound on the optimal value.
    pub best_bound: f64,
    /// Relative optimality gap of the incumbent.
    pub rel_gap: f64,
    pub nodes_explored: usize,
    /// Total ADMM iterations across all node relaxations.
    pub iterations: usize,
}

impl SolveResult {
    fn infeasible(num_vars: usize) -> Self {
        SolveResult {
            status: SolveStatus::Infeasible,
            z: vec![0.0; num_vars],
            objective: f64::INFINITY,
            best_bound: f64::INFINITY,
            rel_gap: 0.0,
            nodes_explored: 0,
            iterations: 0,
        }
    }
}
