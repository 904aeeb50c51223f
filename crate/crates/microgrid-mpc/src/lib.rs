//! Scenario-tree model predictive control for islanded microgrids.
//!
//! The library builds, solves and closed-loop-simulates stochastic MPC
//! problems over forecast scenario trees. Storage energy bounds can be
//! imposed hard, as chance constraints (big-M binary encoding) or as
//! coherent-risk constraints (AV@R in conic dual form). Problems are
//! reduced to a canonical mixed-binary convex QP which is solved by an
//! embedded operator-splitting engine wrapped in branch-and-bound.

pub mod config;
pub mod formulation;
pub mod grid_model;
pub mod risk;
pub mod scenario_tree;
pub mod simulator;
pub mod solver;
