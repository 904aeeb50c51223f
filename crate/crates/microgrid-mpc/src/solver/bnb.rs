//! Best-bound branch-and-bound over the binary variables of an assembled
//! problem. Continuous relaxations share one `QpSolver` (and hence one KKT
//! factorization), since node fixings only pinch binary box rows.

use super::qp::{QpOptions, QpSolver, QpStatus};
use super::{SolveResult, SolveStatus, SolverError};
use crate::formulation::OcpProblem;
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::rc::Rc;

#[derive(Debug, Clone)]
pub struct BnbOptions {
    pub abs_gap: f64,
    pub rel_gap: f64,
    pub max_nodes: usize,
    /// Integrality tolerance for the relaxation values.
    pub int_tol: f64,
    pub qp: QpOptions,
}

impl Default for BnbOptions {
    fn default() -> Self {
        BnbOptions {
            abs_gap: 1e-6,
            rel_gap: 1e-4,
            max_nodes: 20_000,
            int_tol: 1e-6,
            qp: QpOptions::default(),
        }
    }
}

/// Binaries branched on: those below the problem's relaxation stage plus
/// every binary that is never stage-relaxed.
fn branchable_indices(prob: &OcpProblem) -> Vec<usize> {
    prob.binaries
        .iter()
        .enumerate()
        .filter(|(_, b)| !b.stage_relaxable() || b.stage < prob.relax_stage_threshold)
        .map(|(i, _)| i)
        .collect()
}

/// Solve the continuous relaxation (all binaries kept in [0, 1]).
pub fn solve_convex_qp(prob: &OcpProblem, warm: Option<(&[f64], &[f64])>) -> SolveResult {
    let mut solver = QpSolver::new(prob, QpOptions::default());
    let sol = solver.solve(&[], warm);
    let status = match sol.status {
        QpStatus::Solved => SolveStatus::Optimal,
        QpStatus::PrimalInfeasible => SolveStatus::Infeasible,
        QpStatus::DualInfeasible => SolveStatus::Unbounded,
        QpStatus::MaxIterations => SolveStatus::IterationLimit,
    };
    SolveResult {
        status,
        z: sol.x,
        objective: sol.objective,
        best_bound: sol.objective,
        rel_gap: 0.0,
        nodes_explored: 1,
        iterations: sol.iterations,
    }
}

/// Heap key ordered so the smallest bound (then smallest id) pops first.
struct NodeKey {
    bound: f64,
    id: usize,
}

impl PartialEq for NodeKey {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for NodeKey {}
impl PartialOrd for NodeKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for NodeKey {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed: BinaryHeap is a max-heap.
        other
            .bound
            .total_cmp(&self.bound)
            .then_with(|| other.id.cmp(&self.id))
    }
}

struct Node {
    key: NodeKey,
    fixings: Vec<(usize, u8)>,
    warm: Option<Rc<(Vec<f64>, Vec<f64>)>>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.key == other.key
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key.cmp(&other.key)
    }
}

fn overrides_for(prob: &OcpProblem, fixings: &[(usize, u8)]) -> Vec<(usize, f64, f64)> {
    fixings
        .iter()
        .map(|&(bin, v)| {
            let row = prob.binaries[bin].bound_row;
            (row, v as f64, v as f64)
        })
        .collect()
}

pub fn branch_and_bound(
    prob: &OcpProblem,
    opts: &BnbOptions,
    warm: Option<(&[f64], &[f64])>,
) -> SolveResult {
    let branchable = branchable_indices(prob);
    let mut solver = QpSolver::new(prob, opts.qp);
    let mut iterations = 0usize;
    let mut nodes_explored = 0usize;

    let gap_ok = |inc: f64, bound: f64, o: &BnbOptions| {
        inc - bound <= o.abs_gap.max(o.rel_gap * inc.abs())
    };
    let frac = |v: f64| (v - v.round()).abs();

    // Root relaxation.
    let root = solver.solve(&[], warm);
    iterations += root.iterations;
    nodes_explored += 1;
    match root.status {
        QpStatus::PrimalInfeasible => return SolveResult::infeasible(prob.num_vars),
        QpStatus::DualInfeasible => {
            return SolveResult {
                status: SolveStatus::Unbounded,
                z: root.x,
                objective: f64::NEG_INFINITY,
                best_bound: f64::NEG_INFINITY,
                rel_gap: 0.0,
                nodes_explored,
                iterations,
            }
        }
        QpStatus::MaxIterations if branchable.is_empty() => {
            return SolveResult {
                status: SolveStatus::IterationLimit,
                z: root.x,
                objective: root.objective,
                best_bound: f64::NEG_INFINITY,
                rel_gap: f64::INFINITY,
                nodes_explored,
                iterations,
            }
        }
        _ => {}
    }

    let mut incumbent: Option<(f64, Vec<f64>)> = None;

    // Rounding heuristic on the root relaxation for an initial incumbent.
    if !branchable.is_empty() {
        let fixings: Vec<(usize, u8)> = branchable
            .iter()
            .map(|&b| (b, root.x[prob.binaries[b].var].round().clamp(0.0, 1.0) as u8))
            .collect();
        let repaired = solver.solve(&overrides_for(prob, &fixings), Some((&root.x, &root.y)));
        iterations += repaired.iterations;
        if repaired.status == QpStatus::Solved {
            incumbent = Some((repaired.objective, repaired.x));
        }
    } else if root.status == QpStatus::Solved {
        return SolveResult {
            status: SolveStatus::Optimal,
            z: root.x,
            objective: root.objective,
            best_bound: root.objective,
            rel_gap: 0.0,
            nodes_explored,
            iterations,
        };
    }

    let mut heap = BinaryHeap::new();
    // Until a first incumbent exists nothing can be pruned, so the search
    // dives depth-first along the rounded relaxation values to find one
    // quickly; afterwards it switches to best-bound order.
    let mut dive: Vec<Node> = Vec::new();
    let mut next_id = 0usize;
    let root_warm = Rc::new((root.x.clone(), root.y.clone()));

    // Branch the root inline rather than re-solving the root relaxation.
    let root_pick = branchable
        .iter()
        .copied()
        .find(|&b| frac(root.x[prob.binaries[b].var]) > opts.int_tol);
    match root_pick {
        None => {
            // Root relaxation already integral on the branchable set.
            let (objective, z) = match incumbent {
                Some((obj, z)) if obj < root.objective => (obj, z),
                _ => (root.objective, root.x),
            };
            return SolveResult {
                status: SolveStatus::Optimal,
                z,
                objective,
                best_bound: root.objective,
                rel_gap: 0.0,
                nodes_explored,
                iterations,
            };
        }
        Some(b) => {
            let pref = root.x[prob.binaries[b].var].round().clamp(0.0, 1.0) as u8;
            for v in [1 - pref, pref] {
                let node = Node {
                    key: NodeKey { bound: root.objective, id: next_id },
                    fixings: vec![(b, v)],
                    warm: Some(Rc::clone(&root_warm)),
                };
                next_id += 1;
                if incumbent.is_none() {
                    dive.push(node);
                } else {
                    heap.push(node);
                }
            }
        }
    }

    let mut status = SolveStatus::Optimal;
    let mut best_bound = root.objective;

    loop {
        let from_dive = incumbent.is_none() && !dive.is_empty();
        let node = if from_dive {
            dive.pop().unwrap()
        } else {
            if !dive.is_empty() {
                for n in dive.drain(..) {
                    heap.push(n);
                }
            }
            match heap.pop() {
                Some(n) => n,
                None => break,
            }
        };
        if !from_dive {
            best_bound = node.key.bound;
            if let Some((inc_obj, _)) = &incumbent {
                if gap_ok(*inc_obj, node.key.bound, opts) {
                    break;
                }
            }
        }
        if nodes_explored >= opts.max_nodes {
            status = SolveStatus::GapLimit;
            break;
        }

        let warm_pair = node
            .warm
            .as_ref()
            .map(|w| (w.0.as_slice(), w.1.as_slice()));
        let sol = solver.solve(&overrides_for(prob, &node.fixings), warm_pair);
        iterations += sol.iterations;
        nodes_explored += 1;
        if std::env::var("BNB_DEBUG").is_ok() {
            eprintln!(
                "node {nodes_explored}: depth {} {:?} iters {} obj {:.6} bound {:.6} inc {:?}",
                node.fixings.len(),
                sol.status,
                sol.iterations,
                sol.objective,
                node.key.bound,
                incumbent.as_ref().map(|(o, _)| *o)
            );
        }
        if sol.status == QpStatus::PrimalInfeasible {
            continue;
        }
        if let Some((inc_obj, _)) = &incumbent {
            if sol.objective >= *inc_obj - opts.abs_gap.max(opts.rel_gap * inc_obj.abs()) {
                continue;
            }
        }

        // First fractional unfixed branchable in variable order: earliest
        // stage first, commitment binaries before the auxiliary ones.
        let fixed: Vec<usize> = node.fixings.iter().map(|&(b, _)| b).collect();
        let mut pick: Option<(usize, f64)> = None;
        for &b in &branchable {
            if fixed.contains(&b) {
                continue;
            }
            let f = frac(sol.x[prob.binaries[b].var]);
            if f > opts.int_tol {
                pick = Some((b, f));
                break;
            }
        }
        match pick {
            None => {
                // Integer feasible on the branchable set.
                let better = incumbent
                    .as_ref()
                    .map(|(obj, _)| sol.objective < *obj)
                    .unwrap_or(true);
                if better {
                    incumbent = Some((sol.objective, sol.x));
                }
            }
            Some((b, _)) => {
                let pref = sol.x[prob.binaries[b].var].round().clamp(0.0, 1.0) as u8;
                let warm = Rc::new((sol.x, sol.y));
                // Preferred child last so a dive pops it first; order is
                // irrelevant for the best-bound heap.
                for v in [1 - pref, pref] {
                    let mut fixings = node.fixings.clone();
                    fixings.push((b, v));
                    let child = Node {
                        key: NodeKey { bound: sol.objective, id: next_id },
                        fixings,
                        warm: Some(Rc::clone(&warm)),
                    };
                    next_id += 1;
                    if incumbent.is_none() {
                        dive.push(child);
                    } else {
                        heap.push(child);
                    }
                }
            }
        }
    }

    match incumbent {
        Some((objective, z)) => {
            if heap.is_empty() && status == SolveStatus::Optimal {
                // Tree exhausted: the incumbent is optimal.
                best_bound = objective;
            }
            let rel_gap = ((objective - best_bound) / objective.abs().max(1e-10)).max(0.0);
            SolveResult {
                status,
                z,
                objective,
                best_bound,
                rel_gap,
                nodes_explored,
                iterations,
            }
        }
        None => {
            if status == SolveStatus::GapLimit {
                SolveResult {
                    status: SolveStatus::GapLimit,
                    z: vec![0.0; prob.num_vars],
                    objective: f64::INFINITY,
                    best_bound,
                    rel_gap: f64::INFINITY,
                    nodes_explored,
                    iterations,
                }
            } else {
                SolveResult {
                    iterations,
                    nodes_explored,
                    ..SolveResult::infeasible(prob.num_vars)
                }
            }
        }
    }
}

/// Reference mixed-binary solve by full enumeration of the branchable set;
/// usable up to 16 binaries.
pub fn exhaustive_solve(prob: &OcpProblem, opts: &BnbOptions) -> Result<SolveResult, SolverError> {
    let branchable = branchable_indices(prob);
    if branchable.len() > 16 {
        return Err(SolverError::TooManyBinaries(branchable.len()));
    }
    let mut solver = QpSolver::new(prob, opts.qp);
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut iterations = 0usize;
    let mut count = 0usize;
    for mask in 0u32..(1u32 << branchable.len()) {
        let fixings: Vec<(usize, u8)> = branchable
            .iter()
            .enumerate()
            .map(|(bit, &b)| (b, ((mask >> bit) & 1) as u8))
            .collect();
        let sol = solver.solve(&overrides_for(prob, &fixings), None);
        iterations += sol.iterations;
        count += 1;
        if sol.status == QpStatus::Solved {
            let better = best
                .as_ref()
                .map(|(obj, _)| sol.objective < *obj - 1e-12)
                .unwrap_or(true);
            if better {
                best = Some((sol.objective, sol.x));
            }
        }
    }
    Ok(match best {
        Some((objective, z)) => SolveResult {
            status: SolveStatus::Optimal,
            z,
            objective,
            best_bound: objective,
            rel_gap: 0.0,
            nodes_explored: count,
            iterations,
        },
        None => SolveResult {
            iterations,
            nodes_explored: count,
            ..SolveResult::infeasible(prob.num_vars)
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formulation::{BinKind, BinaryVar, OcpProblem};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// min sum (x_i - t_i)^2 with binary x; optimum rounds each target.
    fn separable_binary_problem(targets: &[f64]) -> OcpProblem {
        let n = targets.len();
        let mut p = OcpProblem::continuous(n);
        p.g_ineq.nrows = n;
        for (i, &t) in targets.iter().enumerate() {
            p.quad.push(i, i, 2.0);
            p.lin[i] = -2.0 * t;
            p.constant += t * t;
            p.g_ineq.push(i, i, 1.0);
            p.l_ineq.push(0.0);
            p.u_ineq.push(1.0);
            p.binaries.push(BinaryVar { var: i, stage: 0, kind: BinKind::Delta, bound_row: i });
        }
        p.relax_stage_threshold = usize::MAX;
        p
    }

    #[test]
    fn rounds_separable_targets() {
        let p = separable_binary_problem(&[0.2, 0.8, 0.49]);
        let sol = branch_and_bound(&p, &BnbOptions::default(), None);
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert_abs_diff_eq!(sol.z[0], 0.0, epsilon = 1e-5);
        assert_abs_diff_eq!(sol.z[1], 1.0, epsilon = 1e-5);
        assert_abs_diff_eq!(sol.z[2], 0.0, epsilon = 1e-5);
        let expected = 0.2f64.powi(2) + 0.2f64.powi(2) + 0.49f64.powi(2);
        assert_abs_diff_eq!(sol.objective, expected, epsilon = 1e-5);
    }

    /// Coupled problem where rounding the relaxation is suboptimal:
    /// min (x0 + x1 - 1.1)^2 + 0.01 x0 with binaries.
    fn coupled_problem() -> OcpProblem {
        let mut p = OcpProblem::continuous(2);
        p.quad.push(0, 0, 2.0);
        p.quad.push(1, 1, 2.0);
        p.quad.push(0, 1, 2.0);
        p.quad.push(1, 0, 2.0);
        p.lin = vec![-2.2 + 0.01, -2.2];
        p.constant = 1.1f64.powi(2);
        p.g_ineq.nrows = 2;
        for i in 0..2 {
            p.g_ineq.push(i, i, 1.0);
            p.l_ineq.push(0.0);
            p.u_ineq.push(1.0);
            p.binaries.push(BinaryVar { var: i, stage: 0, kind: BinKind::Delta, bound_row: i });
        }
        p.relax_stage_threshold = usize::MAX;
        p
    }

    #[test]
    fn matches_exhaustive_on_coupled_problem() {
        let p = coupled_problem();
        let bb = branch_and_bound(&p, &BnbOptions::default(), None);
        let ex = exhaustive_solve(&p, &BnbOptions::default()).unwrap();
        assert_eq!(bb.status, SolveStatus::Optimal);
        assert_abs_diff_eq!(bb.objective, ex.objective, epsilon = 1e-6);
        // Optimum picks x1 = 1 (cheaper than x0 by the linear tilt).
        assert_abs_diff_eq!(bb.z[1], 1.0, epsilon = 1e-5);
        assert_abs_diff_eq!(bb.z[0], 0.0, epsilon = 1e-5);
    }

    #[test]
    fn bound_never_exceeds_objective() {
        let p = separable_binary_problem(&[0.3, 0.6, 0.5, 0.1]);
        let sol = branch_and_bound(&p, &BnbOptions::default(), None);
        assert!(sol.best_bound <= sol.objective + 1e-9);
        assert!(sol.rel_gap <= BnbOptions::default().rel_gap + 1e-9);
    }

    #[test]
    fn deterministic_across_runs() {
        let p = coupled_problem();
        let a = branch_and_bound(&p, &BnbOptions::default(), None);
        let b = branch_and_bound(&p, &BnbOptions::default(), None);
        assert_eq!(a.z, b.z);
        assert_eq!(a.objective.to_bits(), b.objective.to_bits());
        assert_eq!(a.nodes_explored, b.nodes_explored);
    }

    #[test]
    fn random_instances_match_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..15 {
            let nb = rng.gen_range(1..5usize);
            let nc = rng.gen_range(0..3usize);
            let n = nb + nc;
            let mut p = OcpProblem::continuous(n);
            for i in 0..n {
                p.quad.push(i, i, rng.gen_range(0.5..3.0));
                p.lin[i] = rng.gen_range(-2.0..2.0);
            }
            if n >= 2 {
                let c = rng.gen_range(-0.4..0.4);
                p.quad.push(0, 1, c);
                p.quad.push(1, 0, c);
            }
            p.g_ineq.nrows = n;
            for i in 0..n {
                p.g_ineq.push(i, i, 1.0);
                if i < nb {
                    p.l_ineq.push(0.0);
                    p.u_ineq.push(1.0);
                    p.binaries.push(BinaryVar {
                        var: i,
                        stage: 0,
                        kind: BinKind::Delta,
                        bound_row: i,
                    });
                } else {
                    p.l_ineq.push(-2.0);
                    p.u_ineq.push(2.0);
                }
            }
            p.relax_stage_threshold = usize::MAX;
            let bb = branch_and_bound(&p, &BnbOptions::default(), None);
            let ex = exhaustive_solve(&p, &BnbOptions::default()).unwrap();
            assert_eq!(bb.status, SolveStatus::Optimal);
            assert_abs_diff_eq!(bb.objective, ex.objective, epsilon = 1e-5);
        }
    }

    #[test]
    fn infeasible_fixings_reported() {
        // Binary x with conflicting row x >= 1.5 is infeasible for both
        // fixings.
        let mut p = separable_binary_problem(&[0.5]);
        p.g_ineq.nrows += 1;
        p.g_ineq.push(1, 0, 1.0);
        p.l_ineq.push(1.5);
        p.u_ineq.push(f64::INFINITY);
        let sol = branch_and_bound(&p, &BnbOptions::default(), None);
        assert_eq!(sol.status, SolveStatus::Infeasible);
    }

    #[test]
    fn exhaustive_rejects_large_binary_sets() {
        let p = separable_binary_problem(&vec![0.5; 17]);
        assert!(matches!(
            exhaustive_solve(&p, &BnbOptions::default()),
            Err(SolverError::TooManyBinaries(17))
        ));
    }
}
