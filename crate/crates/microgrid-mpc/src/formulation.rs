//! Assembly of the optimal control problem variants over a scenario tree
//! and grid into one canonical mixed-binary convex QP.
//!
//! The canonical form is
//!
//! ```text
//!     minimize    0.5 z' Q z + q' z + const
//!     subject to  A z = b
//!                 l <= G z <= u
//!                 z_i in {0, 1}  for i in the binary index set
//! ```
//!
//! Variable boxes are realized as explicit rows of G so that the
//! branch-and-bound layer can fix binaries by pinching their box row.

use crate::grid_model::GridSpec;
use crate::scenario_tree::ScenarioTree;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::ops::Range;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormError {
    #[error("invalid scenario tree: {0:?}")]
    InvalidTree(Vec<String>),
    #[error("invalid grid: {0:?}")]
    InvalidGrid(Vec<String>),
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("invalid big-M parameters: {0}")]
    BadBigM(String),
    #[error("alpha {0} outside [0, 1]")]
    BadAlpha(f64),
    #[error("infeasible bounds in row {0}: lower {1} > upper {2}")]
    InfeasibleBounds(usize, f64, f64),
    #[error("grid error: {0}")]
    Grid(#[from] crate::grid_model::GridError),
}

/// Problem variant: hard bounds only (P), chance constraints (P_cc) or
/// coherent-risk constraints (P_rc) on the soft energy bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Hard,
    Chance,
    Risk,
}

/// Which soft bound a chance/risk row protects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Upper,
    Lower,
}

pub const SIDES: [Side; 2] = [Side::Upper, Side::Lower];

/// Big-M constants of the chance-constraint encoding.
#[derive(Debug, Clone, Copy)]
pub struct BigMParams {
    /// M, at least max(x_max - x_min).
    pub m_big: f64,
    /// m <= 0, lower end of the satisfied-margin range.
    pub m_low: f64,
    /// Strictly positive activation tolerance.
    pub eps: f64,
}

impl BigMParams {
    pub fn defaults(spec: &GridSpec) -> Self {
        let span = spec
            .x_max
            .iter()
            .zip(&spec.x_min)
            .map(|(hi, lo)| hi - lo)
            .fold(0.0f64, f64::max);
        BigMParams { m_big: span, m_low: -span, eps: 1e-4 }
    }

    fn validate(&self, spec: &GridSpec) -> Result<(), FormError> {
        let span = spec
            .x_max
            .iter()
            .zip(&spec.x_min)
            .map(|(hi, lo)| hi - lo)
            .fold(0.0f64, f64::max);
        if self.m_big < span {
            return Err(FormError::BadBigM(format!(
                "M = {} below max(x_max - x_min) = {span}",
                self.m_big
            )));
        }
        if self.m_low > 0.0 {
            return Err(FormError::BadBigM(format!("m = {} must be <= 0", self.m_low)));
        }
        if !(self.eps > 0.0 && self.eps < self.m_big) {
            return Err(FormError::BadBigM(format!(
                "eps = {} must satisfy 0 < eps < M",
                self.eps
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AssembleOptions {
    /// Stage from which model binaries (delta, beta) are relaxed to [0, 1].
    pub relax_stage_threshold: usize,
    pub big_m: BigMParams,
}

impl AssembleOptions {
    pub fn new(spec: &GridSpec) -> Self {
        AssembleOptions {
            relax_stage_threshold: 4,
            big_m: BigMParams::defaults(spec),
        }
    }
}

/// Triplet sparse matrix, duplicate entries summed.
#[derive(Debug, Clone, Default)]
pub struct SparseMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub triplets: Vec<(usize, usize, f64)>,
}

impl SparseMatrix {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        SparseMatrix { nrows, ncols, triplets: Vec::new() }
    }

    pub fn push(&mut self, row: usize, col: usize, val: f64) {
        debug_assert!(row < self.nrows && col < self.ncols);
        if val != 0.0 {
            self.triplets.push((row, col, val));
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for &(r, c, v) in &self.triplets {
            m[(r, c)] += v;
        }
        m
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        for &(r, c, v) in &self.triplets {
            y[r] += v * x[c];
        }
        y
    }
}

/// Kind of a binary decision variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinKind {
    /// Conventional unit commitment.
    Delta,
    /// Renewable min-selector.
    Beta,
    /// Chance-constraint satisfaction indicator; never stage-relaxed.
    Tau,
}

#[derive(Debug, Clone, Copy)]
pub struct BinaryVar {
    pub var: usize,
    pub stage: usize,
    pub kind: BinKind,
    /// Row of G holding this variable's [0, 1] box.
    pub bound_row: usize,
}

impl BinaryVar {
    /// Whether this binary participates in stage-threshold relaxation.
    pub fn stage_relaxable(&self) -> bool {
        !matches!(self.kind, BinKind::Tau)
    }
}

/// Symbolic map from tree nodes to decision-vector indices.
#[derive(Debug, Clone)]
pub struct VarMap {
    pub n_t: usize,
    pub n_s: usize,
    pub n_r: usize,
    /// Start of [u_t, u_s, u_r, delta] per input (non-leaf) node.
    input_offset: Vec<Option<usize>>,
    /// Start of the state block per node.
    x_offset: Vec<usize>,
    /// Start of [p_t, p_s, p_r, mu, phi] per non-root node.
    power_offset: Vec<Option<usize>>,
    /// Start of the beta block per non-root node.
    beta_offset: Vec<Option<usize>>,
    /// Start of [xi, tau] per (side, non-root node); chance variant only.
    chance_offset: [Vec<Option<usize>>; 2],
    /// Start of the dual block y per (side, storage, stage-1); risk variant.
    risk_offset: [Vec<Vec<Option<usize>>>; 2],
    pub num_vars: usize,
}

fn side_idx(side: Side) -> usize {
    match side {
        Side::Upper => 0,
        Side::Lower => 1,
    }
}

impl VarMap {
    pub fn empty() -> Self {
        VarMap {
            n_t: 0,
            n_s: 0,
            n_r: 0,
            input_offset: Vec::new(),
            x_offset: Vec::new(),
            power_offset: Vec::new(),
            beta_offset: Vec::new(),
            chance_offset: [Vec::new(), Vec::new()],
            risk_offset: [Vec::new(), Vec::new()],
            num_vars: 0,
        }
    }

    fn build(variant: Variant, tree: &ScenarioTree, spec: &GridSpec) -> Self {
        let n = tree.node_count();
        let (n_t, n_s, n_r) = (spec.n_t, spec.n_s, spec.n_r);
        let mut next = 0usize;
        let mut input_offset = vec![None; n];
        let mut x_offset = vec![0usize; n];
        let mut power_offset = vec![None; n];
        let mut beta_offset = vec![None; n];
        for i in 0..n {
            if !tree.children_of(i).is_empty() {
                input_offset[i] = Some(next);
                next += 2 * n_t + n_s + n_r; // u_t, u_s, u_r, delta
            }
        }
        for x in x_offset.iter_mut() {
            *x = next;
            next += n_s;
        }
        for i in 1..n {
            power_offset[i] = Some(next);
            next += n_t + n_s + n_r + 1 + n_t; // p_t, p_s, p_r, mu, phi
            beta_offset[i] = Some(next);
            next += n_r;
        }
        let mut chance_offset = [vec![None; n], vec![None; n]];
        let mut risk_offset = [Vec::new(), Vec::new()];
        match variant {
            Variant::Chance => {
                for co in chance_offset.iter_mut() {
                    for slot in co.iter_mut().skip(1) {
                        *slot = Some(next);
                        next += 2 * n_s; // xi, tau
                    }
                }
            }
            Variant::Risk => {
                for ro in risk_offset.iter_mut() {
                    *ro = vec![vec![None; tree.horizon()]; n_s];
                    for storage in ro.iter_mut() {
                        for (j, slot) in storage.iter_mut().enumerate() {
                            let nj = tree.stage_node_count(j + 1);
                            *slot = Some(next);
                            next += 2 * nj + 1;
                        }
                    }
                }
            }
            Variant::Hard => {}
        }
        VarMap {
            n_t,
            n_s,
            n_r,
            input_offset,
            x_offset,
            power_offset,
            beta_offset,
            chance_offset,
            risk_offset,
            num_vars: next,
        }
    }

    pub fn has_input(&self, node: usize) -> bool {
        self.input_offset[node].is_some()
    }

    pub fn u_t(&self, node: usize, t: usize) -> usize {
        self.input_offset[node].expect("leaf node has no input") + t
    }

    pub fn u_s(&self, node: usize, s: usize) -> usize {
        self.input_offset[node].unwrap() + self.n_t + s
    }

    pub fn u_r(&self, node: usize, r: usize) -> usize {
        self.input_offset[node].unwrap() + self.n_t + self.n_s + r
    }

    pub fn delta(&self, node: usize, t: usize) -> usize {
        self.input_offset[node].unwrap() + self.n_t + self.n_s + self.n_r + t
    }

    pub fn x(&self, node: usize, s: usize) -> usize {
        self.x_offset[node] + s
    }

    pub fn p_t(&self, node: usize, t: usize) -> usize {
        self.power_offset[node].expect("root node has no power") + t
    }

    pub fn p_s(&self, node: usize, s: usize) -> usize {
        self.power_offset[node].unwrap() + self.n_t + s
    }

    pub fn p_r(&self, node: usize, r: usize) -> usize {
        self.power_offset[node].unwrap() + self.n_t + self.n_s + r
    }

    pub fn mu(&self, node: usize) -> usize {
        self.power_offset[node].unwrap() + self.n_t + self.n_s + self.n_r
    }

    pub fn phi(&self, node: usize, t: usize) -> usize {
        self.power_offset[node].unwrap() + self.n_t + self.n_s + self.n_r + 1 + t
    }

    pub fn beta(&self, node: usize, r: usize) -> usize {
        self.beta_offset[node].expect("root node has no beta") + r
    }

    pub fn xi(&self, side: Side, node: usize, s: usize) -> usize {
        self.chance_offset[side_idx(side)][node].expect("no chance variables") + s
    }

    pub fn tau(&self, side: Side, node: usize, s: usize) -> usize {
        self.chance_offset[side_idx(side)][node].unwrap() + self.n_s + s
    }

    /// Dual block y for (side, storage, stage j >= 1), length 2 n_j + 1.
    pub fn risk_y(&self, side: Side, s: usize, stage: usize, nj: usize) -> Range<usize> {
        let start = self.risk_offset[side_idx(side)][s][stage - 1].expect("no risk variables");
        start..start + 2 * nj + 1
    }
}

/// Row ranges of the assembled constraint blocks.
#[derive(Debug, Clone, Default)]
pub struct RowMap {
    pub eq_root_state: Range<usize>,
    pub eq_dynamics: Range<usize>,
    pub eq_balance: Range<usize>,
    pub eq_sharing: Range<usize>,
    pub eq_risk_margin: Range<usize>,
    pub boxes: Range<usize>,
    pub conv_limits: Range<usize>,
    pub renewable_big_m: Range<usize>,
    pub mccormick: Range<usize>,
    pub line_limits: Range<usize>,
    pub chance: Range<usize>,
    pub risk_budget: Range<usize>,
}

/// Canonical mixed-binary convex QP with its variable map.
#[derive(Debug, Clone)]
pub struct OcpProblem {
    pub num_vars: usize,
    /// Symmetric PSD quadratic term of 0.5 z' Q z.
    pub quad: SparseMatrix,
    pub lin: Vec<f64>,
    pub constant: f64,
    pub a_eq: SparseMatrix,
    pub b_eq: Vec<f64>,
    pub g_ineq: SparseMatrix,
    pub l_ineq: Vec<f64>,
    pub u_ineq: Vec<f64>,
    pub binaries: Vec<BinaryVar>,
    pub var_map: VarMap,
    pub row_map: RowMap,
    pub relax_stage_threshold: usize,
}

impl OcpProblem {
    /// Continuous problem shell without tree structure (solver tests,
    /// risk duals).
    pub fn continuous(num_vars: usize) -> Self {
        OcpProblem {
            num_vars,
            quad: SparseMatrix::new(num_vars, num_vars),
            lin: vec![0.0; num_vars],
            constant: 0.0,
            a_eq: SparseMatrix::new(0, num_vars),
            b_eq: Vec::new(),
            g_ineq: SparseMatrix::new(0, num_vars),
            l_ineq: Vec::new(),
            u_ineq: Vec::new(),
            binaries: Vec::new(),
            var_map: VarMap::empty(),
            row_map: RowMap::default(),
            relax_stage_threshold: usize::MAX,
        }
    }

    pub fn objective_value(&self, z: &[f64]) -> f64 {
        let mut quad = 0.0;
        for &(r, c, v) in &self.quad.triplets {
            quad += z[r] * v * z[c];
        }
        0.5 * quad + self.lin.iter().zip(z).map(|(q, x)| q * x).sum::<f64>() + self.constant
    }

    /// Max absolute equality residual |A z - b|.
    pub fn eq_residual(&self, z: &[f64]) -> f64 {
        let az = self.a_eq.mul_vec(z);
        az.iter()
            .zip(&self.b_eq)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Max violation of l <= G z <= u.
    pub fn ineq_violation(&self, z: &[f64]) -> f64 {
        let gz = self.g_ineq.mul_vec(z);
        gz.iter()
            .enumerate()
            .map(|(i, g)| (self.l_ineq[i] - g).max(g - self.u_ineq[i]).max(0.0))
            .fold(0.0, f64::max)
    }

    /// Triplet-list text dump for external cross-checking.
    pub fn dump_triplets(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "num_vars {}", self.num_vars);
        let _ = writeln!(s, "constant {:.17e}", self.constant);
        let mut block = |name: &str, m: &SparseMatrix| {
            let _ = writeln!(s, "matrix {name} {} {} {}", m.nrows, m.ncols, m.triplets.len());
            for &(r, c, v) in &m.triplets {
                let _ = writeln!(s, "{r} {c} {v:.17e}");
            }
        };
        block("Q", &self.quad);
        block("A", &self.a_eq);
        block("G", &self.g_ineq);
        let mut vecs = |name: &str, v: &[f64]| {
            let _ = writeln!(s, "vector {name} {}", v.len());
            for x in v {
                let _ = writeln!(s, "{x:.17e}");
            }
        };
        vecs("q", &self.lin);
        vecs("b", &self.b_eq);
        vecs("l", &self.l_ineq);
        vecs("u", &self.u_ineq);
        s
    }
}

/// Incrementally builds the canonical problem.
struct Builder {
    prob: OcpProblem,
}

impl Builder {
    fn new(var_map: VarMap, relax_stage_threshold: usize) -> Self {
        let n = var_map.num_vars;
        let mut prob = OcpProblem::continuous(n);
        prob.var_map = var_map;
        prob.relax_stage_threshold = relax_stage_threshold;
        Builder { prob }
    }

    fn eq(&mut self, entries: &[(usize, f64)], rhs: f64) -> usize {
        let row = self.prob.a_eq.nrows;
        self.prob.a_eq.nrows += 1;
        for &(c, v) in entries {
            self.prob.a_eq.push(row, c, v);
        }
        self.prob.b_eq.push(rhs);
        row
    }

    fn ineq(&mut self, entries: &[(usize, f64)], l: f64, u: f64) -> usize {
        let row = self.prob.g_ineq.nrows;
        self.prob.g_ineq.nrows += 1;
        for &(c, v) in entries {
            self.prob.g_ineq.push(row, c, v);
        }
        self.prob.l_ineq.push(l);
        self.prob.u_ineq.push(u);
        row
    }

    fn eq_rows(&self) -> usize {
        self.prob.a_eq.nrows
    }

    fn ineq_rows(&self) -> usize {
        self.prob.g_ineq.nrows
    }
}

/// Objective contribution of the operating costs.
#[derive(Debug, Clone, Default)]
pub struct Objective {
    /// Triplets of Q (both halves of the symmetric matrix).
    pub quad: Vec<(usize, usize, f64)>,
    pub lin: Vec<(usize, f64)>,
    pub constant: f64,
}

/// Discounted expected operating cost over the tree, per the per-node cost
/// of fuel, switching and curtailment.
pub fn cost_terms(
    tree: &ScenarioTree,
    spec: &GridSpec,
    v0minus: &[f64],
    vm: &VarMap,
) -> Objective {
    let mut obj = Objective::default();
    for ip in 1..tree.node_count() {
        let i = tree.ancestor_of(ip).expect("non-root node");
        let w = tree.probability(ip) * spec.gamma.powi(tree.stage_of(ip) as i32);
        for t in 0..spec.n_t {
            // Fuel: c_t' delta + c_t'' p_t + (c_t''' p_t)^2.
            obj.lin.push((vm.delta(i, t), w * spec.c_t[t]));
            obj.lin.push((vm.p_t(ip, t), w * spec.c_t_prime[t]));
            let cq = spec.c_t_prime_prime[t] * spec.c_t_prime_prime[t];
            obj.quad.push((vm.p_t(ip, t), vm.p_t(ip, t), 2.0 * w * cq));
            // Switching relative to the ancestor's commitment (or the
            // previously applied input at the root).
            let cs = spec.c_t_s[t] * spec.c_t_s[t];
            let d = vm.delta(i, t);
            obj.quad.push((d, d, 2.0 * w * cs));
            match tree.ancestor_of(i) {
                Some(im) => {
                    let dp = vm.delta(im, t);
                    obj.quad.push((dp, dp, 2.0 * w * cs));
                    obj.quad.push((d, dp, -2.0 * w * cs));
                    obj.quad.push((dp, d, -2.0 * w * cs));
                }
                None => {
                    let dp = v0minus[t];
                    obj.lin.push((d, -2.0 * w * cs * dp));
                    obj.constant += w * cs * dp * dp;
                }
            }
        }
        for r in 0..spec.n_r {
            // Curtailment: (c_r (p_r_max - p_r))^2.
            let cr = spec.c_r[r] * spec.c_r[r];
            let p = vm.p_r(ip, r);
            obj.quad.push((p, p, 2.0 * w * cr));
            obj.lin.push((p, -2.0 * w * cr * spec.p_r_max[r]));
            obj.constant += w * cr * spec.p_r_max[r] * spec.p_r_max[r];
        }
    }
    obj
}

/// Decoded solution values per node, in physical quantities.
#[derive(Debug, Clone, Serialize)]
pub struct DecodedNode {
    pub id: usize,
    pub stage: usize,
    pub u_t: Option<Vec<f64>>,
    pub u_s: Option<Vec<f64>>,
    pub u_r: Option<Vec<f64>>,
    pub delta: Option<Vec<f64>>,
    pub p_t: Option<Vec<f64>>,
    pub p_s: Option<Vec<f64>>,
    pub p_r: Option<Vec<f64>>,
    pub mu: Option<f64>,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecodedSolution {
    pub objective: f64,
    pub nodes: Vec<DecodedNode>,
}

impl OcpProblem {
    pub fn decode(&self, tree: &ScenarioTree, z: &[f64]) -> DecodedSolution {
        let vm = &self.var_map;
        let nodes = (0..tree.node_count())
            .map(|i| {
                let input = vm.has_input(i);
                let root = tree.ancestor_of(i).is_none();
                DecodedNode {
                    id: i,
                    stage: tree.stage_of(i),
                    u_t: input.then(|| (0..vm.n_t).map(|t| z[vm.u_t(i, t)]).collect()),
                    u_s: input.then(|| (0..vm.n_s).map(|s| z[vm.u_s(i, s)]).collect()),
                    u_r: input.then(|| (0..vm.n_r).map(|r| z[vm.u_r(i, r)]).collect()),
                    delta: input.then(|| (0..vm.n_t).map(|t| z[vm.delta(i, t)]).collect()),
                    p_t: (!root).then(|| (0..vm.n_t).map(|t| z[vm.p_t(i, t)]).collect()),
                    p_s: (!root).then(|| (0..vm.n_s).map(|s| z[vm.p_s(i, s)]).collect()),
                    p_r: (!root).then(|| (0..vm.n_r).map(|r| z[vm.p_r(i, r)]).collect()),
                    mu: (!root).then(|| z[vm.mu(i)]),
                    x: (0..vm.n_s).map(|s| z[vm.x(i, s)]).collect(),
                }
            })
            .collect();
        DecodedSolution {
            objective: self.objective_value(z),
            nodes,
        }
    }
}

/// Direct evaluation of the discounted expected cost from decoded node
/// values; the independent route used to cross-check the assembled
/// objective.
pub fn evaluate_cost(
    tree: &ScenarioTree,
    spec: &GridSpec,
    v0minus: &[f64],
    sol: &DecodedSolution,
) -> f64 {
    let mut total = 0.0;
    for ip in 1..tree.node_count() {
        let i = tree.ancestor_of(ip).unwrap();
        let w = tree.probability(ip) * spec.gamma.powi(tree.stage_of(ip) as i32);
        let delta = sol.nodes[i].delta.as_ref().unwrap();
        let p_t = sol.nodes[ip].p_t.as_ref().unwrap();
        let p_r = sol.nodes[ip].p_r.as_ref().unwrap();
        let prev: Vec<f64> = match tree.ancestor_of(i) {
            Some(im) => sol.nodes[im].delta.clone().unwrap(),
            None => v0minus.to_vec(),
        };
        let mut node_cost = 0.0;
        for t in 0..spec.n_t {
            node_cost += spec.c_t[t] * delta[t] + spec.c_t_prime[t] * p_t[t];
            node_cost += (spec.c_t_prime_prime[t] * p_t[t]).powi(2);
            node_cost += (spec.c_t_s[t] * (prev[t] - delta[t])).powi(2);
        }
        for r in 0..spec.n_r {
            node_cost += (spec.c_r[r] * (spec.p_r_max[r] - p_r[r])).powi(2);
        }
        total += w * node_cost;
    }
    total
}

/// Assemble a problem variant over a validated tree and grid.
pub fn assemble(
    variant: Variant,
    tree: &ScenarioTree,
    spec: &GridSpec,
    x0: &[f64],
    v0minus: &[f64],
    alpha: f64,
    options: &AssembleOptions,
) -> Result<OcpProblem, FormError> {
    let tv = tree.validate();
    if !tv.is_empty() {
        return Err(FormError::InvalidTree(tv));
    }
    let gv = spec.validate_grid();
    if !gv.is_empty() {
        return Err(FormError::InvalidGrid(gv));
    }
    if x0.len() != spec.n_s {
        return Err(FormError::Dim(format!(
            "x0 has length {}, expected {}",
            x0.len(),
            spec.n_s
        )));
    }
    if v0minus.len() != spec.n_t {
        return Err(FormError::Dim(format!(
            "v0minus has length {}, expected {}",
            v0minus.len(),
            spec.n_t
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(FormError::BadAlpha(alpha));
    }
    options.big_m.validate(spec)?;
    for i in 1..tree.node_count() {
        let d = tree.disturbance(i);
        if d.w_r.len() != spec.n_r || d.w_d.len() != spec.n_d {
            return Err(FormError::Dim(format!(
                "node {i} disturbance sized ({}, {}), grid expects ({}, {})",
                d.w_r.len(),
                d.w_d.len(),
                spec.n_r,
                spec.n_d
            )));
        }
    }

    // Risk at alpha = 0 degenerates to hard soft-bounds on every node;
    // encoded directly as tightened state boxes.
    let risk_hard = variant == Variant::Risk && alpha == 0.0;
    let map_variant = if risk_hard { Variant::Hard } else { variant };
    let vm = VarMap::build(map_variant, tree, spec);
    let mut b = Builder::new(vm, options.relax_stage_threshold);
    let n = tree.node_count();

    // Objective.
    let obj = cost_terms(tree, spec, v0minus, &b.prob.var_map);
    for (r, c, v) in obj.quad {
        b.prob.quad.push(r, c, v);
    }
    for (i, v) in obj.lin {
        b.prob.lin[i] += v;
    }
    b.prob.constant = obj.constant;

    // --- Equalities ---------------------------------------------------
    let eq0 = b.eq_rows();
    for s in 0..spec.n_s {
        let idx = b.prob.var_map.x(0, s);
        b.eq(&[(idx, 1.0)], x0[s]);
    }
    b.prob.row_map.eq_root_state = eq0..b.eq_rows();

    // Dynamics x+ = x - T_s p_s.
    let start = b.eq_rows();
    for ip in 1..n {
        let i = tree.ancestor_of(ip).unwrap();
        for s in 0..spec.n_s {
            let (xp, x, ps) = (
                b.prob.var_map.x(ip, s),
                b.prob.var_map.x(i, s),
                b.prob.var_map.p_s(ip, s),
            );
            b.eq(&[(xp, 1.0), (x, -1.0), (ps, spec.t_s)], 0.0);
        }
    }
    b.prob.row_map.eq_dynamics = start..b.eq_rows();

    // Power balance with the node's fixed load.
    let start = b.eq_rows();
    for ip in 1..n {
        let wd_sum: f64 = tree.disturbance(ip).w_d.iter().sum();
        let mut entries = Vec::new();
        for t in 0..spec.n_t {
            entries.push((b.prob.var_map.p_t(ip, t), 1.0));
        }
        for s in 0..spec.n_s {
            entries.push((b.prob.var_map.p_s(ip, s), 1.0));
        }
        for r in 0..spec.n_r {
            entries.push((b.prob.var_map.p_r(ip, r), 1.0));
        }
        b.eq(&entries, -wd_sum);
    }
    b.prob.row_map.eq_balance = start..b.eq_rows();

    // Power sharing: K_s (p_s - u_s) = mu and K_t (p_t - u_t) = phi.
    let start = b.eq_rows();
    for ip in 1..n {
        let i = tree.ancestor_of(ip).unwrap();
        let mu = b.prob.var_map.mu(ip);
        for s in 0..spec.n_s {
            let (ps, us) = (b.prob.var_map.p_s(ip, s), b.prob.var_map.u_s(i, s));
            b.eq(&[(ps, spec.k_s[s]), (us, -spec.k_s[s]), (mu, -1.0)], 0.0);
        }
        for t in 0..spec.n_t {
            let (pt, ut, phi) = (
                b.prob.var_map.p_t(ip, t),
                b.prob.var_map.u_t(i, t),
                b.prob.var_map.phi(ip, t),
            );
            b.eq(&[(pt, spec.k_t[t]), (ut, -spec.k_t[t]), (phi, -1.0)], 0.0);
        }
    }
    b.prob.row_map.eq_sharing = start..b.eq_rows();

    // --- Variable boxes ------------------------------------------------
    let start = b.ineq_rows();
    let mut binaries = Vec::new();
    for i in 0..n {
        if b.prob.var_map.has_input(i) {
            let stage = tree.stage_of(i);
            for t in 0..spec.n_t {
                let idx = b.prob.var_map.u_t(i, t);
                b.ineq(&[(idx, 1.0)], 0.0, spec.p_t_max[t]);
            }
            for s in 0..spec.n_s {
                let idx = b.prob.var_map.u_s(i, s);
                b.ineq(&[(idx, 1.0)], spec.p_s_min[s], spec.p_s_max[s]);
            }
            for r in 0..spec.n_r {
                let idx = b.prob.var_map.u_r(i, r);
                b.ineq(&[(idx, 1.0)], spec.p_r_min[r], spec.p_r_max[r]);
            }
            for t in 0..spec.n_t {
                let idx = b.prob.var_map.delta(i, t);
                let row = b.ineq(&[(idx, 1.0)], 0.0, 1.0);
                binaries.push(BinaryVar { var: idx, stage, kind: BinKind::Delta, bound_row: row });
            }
        }
    }
    for ip in 1..n {
        let stage = tree.stage_of(ip);
        for t in 0..spec.n_t {
            let idx = b.prob.var_map.p_t(ip, t);
            b.ineq(&[(idx, 1.0)], 0.0, spec.p_t_max[t]);
        }
        for s in 0..spec.n_s {
            let idx = b.prob.var_map.p_s(ip, s);
            b.ineq(&[(idx, 1.0)], spec.p_s_min[s], spec.p_s_max[s]);
        }
        for r in 0..spec.n_r {
            let idx = b.prob.var_map.p_r(ip, r);
            b.ineq(&[(idx, 1.0)], spec.p_r_min[r], spec.p_r_max[r]);
        }
        for s in 0..spec.n_s {
            let idx = b.prob.var_map.x(ip, s);
            let (lo, hi) = if risk_hard {
                (spec.x_soft_min[s], spec.x_soft_max[s])
            } else {
                (spec.x_min[s], spec.x_max[s])
            };
            b.ineq(&[(idx, 1.0)], lo, hi);
        }
        for r in 0..spec.n_r {
            let idx = b.prob.var_map.beta(ip, r);
            let row = b.ineq(&[(idx, 1.0)], 0.0, 1.0);
            binaries.push(BinaryVar { var: idx, stage, kind: BinKind::Beta, bound_row: row });
        }
    }
    b.prob.row_map.boxes = start..b.ineq_rows();

    // --- Conventional delta-scaled limits -------------------------------
    let start = b.ineq_rows();
    for i in 0..n {
        if !b.prob.var_map.has_input(i) {
            continue;
        }
        for t in 0..spec.n_t {
            let (ut, d) = (b.prob.var_map.u_t(i, t), b.prob.var_map.delta(i, t));
            b.ineq(&[(ut, 1.0), (d, -spec.p_t_max[t])], f64::NEG_INFINITY, 0.0);
            b.ineq(&[(ut, 1.0), (d, -spec.p_t_min[t])], 0.0, f64::INFINITY);
        }
    }
    for ip in 1..n {
        let i = tree.ancestor_of(ip).unwrap();
        for t in 0..spec.n_t {
            let (pt, d) = (b.prob.var_map.p_t(ip, t), b.prob.var_map.delta(i, t));
            b.ineq(&[(pt, 1.0), (d, -spec.p_t_max[t])], f64::NEG_INFINITY, 0.0);
            b.ineq(&[(pt, 1.0), (d, -spec.p_t_min[t])], 0.0, f64::INFINITY);
        }
    }
    b.prob.row_map.conv_limits = start..b.ineq_rows();

    // --- Renewable min-selector big-M ------------------------------------
    let start = b.ineq_rows();
    for ip in 1..n {
        let i = tree.ancestor_of(ip).unwrap();
        for r in 0..spec.n_r {
            let wr = tree.disturbance(ip).w_r[r];
            let m = spec.p_r_max[r];
            let (pr, ur, beta) = (
                b.prob.var_map.p_r(ip, r),
                b.prob.var_map.u_r(i, r),
                b.prob.var_map.beta(ip, r),
            );
            b.ineq(&[(pr, 1.0), (ur, -1.0)], f64::NEG_INFINITY, 0.0);
            b.ineq(&[(pr, 1.0)], f64::NEG_INFINITY, wr);
            // p_r >= u_r - M (1 - beta)
            b.ineq(&[(ur, 1.0), (pr, -1.0), (beta, m)], f64::NEG_INFINITY, m);
            // p_r >= w_r - M beta
            b.ineq(&[(pr, 1.0), (beta, m)], wr, f64::INFINITY);
        }
    }
    b.prob.row_map.renewable_big_m = start..b.ineq_rows();

    // --- McCormick rows linearizing phi = mu * delta ----------------------
    let m_mu = {
        let ms = spec
            .k_s
            .iter()
            .zip(spec.p_s_max.iter().zip(&spec.p_s_min))
            .map(|(k, (hi, lo))| k * (hi - lo))
            .fold(0.0f64, f64::max);
        let mt = spec
            .k_t
            .iter()
            .zip(&spec.p_t_max)
            .map(|(k, hi)| k * hi)
            .fold(0.0f64, f64::max);
        2.0 * ms.max(mt)
    };
    let start = b.ineq_rows();
    for ip in 1..n {
        let i = tree.ancestor_of(ip).unwrap();
        let mu = b.prob.var_map.mu(ip);
        for t in 0..spec.n_t {
            let (phi, d) = (b.prob.var_map.phi(ip, t), b.prob.var_map.delta(i, t));
            b.ineq(&[(phi, 1.0), (d, -m_mu)], f64::NEG_INFINITY, 0.0);
            b.ineq(&[(phi, 1.0), (d, m_mu)], 0.0, f64::INFINITY);
            b.ineq(&[(phi, 1.0), (mu, -1.0), (d, m_mu)], f64::NEG_INFINITY, m_mu);
            b.ineq(&[(phi, 1.0), (mu, -1.0), (d, -m_mu)], -m_mu, f64::INFINITY);
        }
    }
    b.prob.row_map.mccormick = start..b.ineq_rows();

    // --- Line limits -----------------------------------------------------
    let start = b.ineq_rows();
    if spec.n_e > 0 {
        let f = spec.ptdf_matrix()?;
        for ip in 1..n {
            let d = tree.disturbance(ip);
            for line in 0..spec.n_e {
                let mut entries = Vec::new();
                for t in 0..spec.n_t {
                    entries.push((b.prob.var_map.p_t(ip, t), f[(line, t)]));
                }
                for s in 0..spec.n_s {
                    entries.push((b.prob.var_map.p_s(ip, s), f[(line, spec.n_t + s)]));
                }
                for r in 0..spec.n_r {
                    entries.push((b.prob.var_map.p_r(ip, r), f[(line, spec.n_t + spec.n_s + r)]));
                }
                let fixed: f64 = (0..spec.n_d)
                    .map(|ld| f[(line, spec.n_t + spec.n_s + spec.n_r + ld)] * d.w_d[ld])
                    .sum();
                b.ineq(&entries, spec.p_e_min[line] - fixed, spec.p_e_max[line] - fixed);
            }
        }
    }
    b.prob.row_map.line_limits = start..b.ineq_rows();

    // --- Soft-bound machinery ---------------------------------------------
    match variant {
        Variant::Hard => {}
        Variant::Chance => {
            let start = b.ineq_rows();
            let bm = options.big_m;
            for side in SIDES {
                for ip in 1..n {
                    let stage = tree.stage_of(ip);
                    for s in 0..spec.n_s {
                        let (xi, tau, x) = (
                            b.prob.var_map.xi(side, ip, s),
                            b.prob.var_map.tau(side, ip, s),
                            b.prob.var_map.x(ip, s),
                        );
                        // Signed margin g <= xi.
                        match side {
                            Side::Upper => {
                                b.ineq(
                                    &[(x, 1.0), (xi, -1.0)],
                                    f64::NEG_INFINITY,
                                    spec.x_soft_max[s],
                                );
                            }
                            Side::Lower => {
                                b.ineq(
                                    &[(x, -1.0), (xi, -1.0)],
                                    f64::NEG_INFINITY,
                                    -spec.x_soft_min[s],
                                );
                            }
                        }
                        // eps + (m - eps) tau <= xi <= M (1 - tau)
                        b.ineq(&[(xi, 1.0), (tau, bm.m_big)], f64::NEG_INFINITY, bm.m_big);
                        b.ineq(&[(xi, 1.0), (tau, bm.eps - bm.m_low)], bm.eps, f64::INFINITY);
                        let row = b.ineq(&[(tau, 1.0)], 0.0, 1.0);
                        binaries.push(BinaryVar {
                            var: tau,
                            stage,
                            kind: BinKind::Tau,
                            bound_row: row,
                        });
                    }
                }
                // Stage rows pi' tau >= 1 - alpha.
                for j in 1..=tree.horizon() {
                    for s in 0..spec.n_s {
                        let entries: Vec<(usize, f64)> = tree
                            .nodes_at_stage(j)
                            .map(|i| (b.prob.var_map.tau(side, i, s), tree.probability(i)))
                            .collect();
                        b.ineq(&entries, 1.0 - alpha, f64::INFINITY);
                    }
                }
            }
            b.prob.row_map.chance = start..b.ineq_rows();
        }
        Variant::Risk if !risk_hard => {
            let eq_start = b.eq_rows();
            let ineq_start = b.ineq_rows();
            for side in SIDES {
                for s in 0..spec.n_s {
                    for j in 1..=tree.horizon() {
                        let nodes: Vec<usize> = tree.nodes_at_stage(j).collect();
                        let nj = nodes.len();
                        let y = b.prob.var_map.risk_y(side, s, j, nj);
                        let y_start = y.start;
                        let y_free = y_start + 2 * nj;
                        // E' y = g with E = [I; -I; 1'].
                        for (k, &node) in nodes.iter().enumerate() {
                            let x = b.prob.var_map.x(node, s);
                            let (x_coef, rhs) = match side {
                                Side::Upper => (-1.0, -spec.x_soft_max[s]),
                                Side::Lower => (1.0, spec.x_soft_min[s]),
                            };
                            b.eq(
                                &[
                                    (y_start + k, 1.0),
                                    (y_start + nj + k, -1.0),
                                    (y_free, 1.0),
                                    (x, x_coef),
                                ],
                                rhs,
                            );
                        }
                        // y in K*: first 2 n_j components nonnegative.
                        for k in 0..2 * nj {
                            b.ineq(&[(y_start + k, 1.0)], 0.0, f64::INFINITY);
                        }
                        // Budget y' b <= 0 with b = [pi / alpha; 0; 1].
                        let mut entries: Vec<(usize, f64)> = nodes
                            .iter()
                            .enumerate()
                            .map(|(k, &node)| (y_start + k, tree.probability(node) / alpha))
                            .collect();
                        entries.push((y_free, 1.0));
                        b.ineq(&entries, f64::NEG_INFINITY, 0.0);
                    }
                }
            }
            b.prob.row_map.eq_risk_margin = eq_start..b.eq_rows();
            b.prob.row_map.risk_budget = ineq_start..b.ineq_rows();
        }
        Variant::Risk => {}
    }

    b.prob.binaries = binaries;

    // Early detection of inverted bounds.
    for (row, (l, u)) in b.prob.l_ineq.iter().zip(&b.prob.u_ineq).enumerate() {
        if l > u {
            return Err(FormError::InfeasibleBounds(row, *l, *u));
        }
    }
    Ok(b.prob)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario_tree::Disturbance;
    use approx::assert_abs_diff_eq;

    pub(crate) fn chain_tree(horizon: usize, w_r: f64, w_d: f64) -> ScenarioTree {
        let mut nodes = vec![(0, None, 1.0, None)];
        for j in 1..=horizon {
            nodes.push((
                j,
                Some(j - 1),
                1.0,
                Some(Disturbance { w_r: vec![w_r], w_d: vec![w_d] }),
            ));
        }
        ScenarioTree::from_nodes(horizon, nodes).unwrap()
    }

    fn opts(spec: &GridSpec) -> AssembleOptions {
        AssembleOptions::new(spec)
    }

    #[test]
    fn binary_counts_per_variant() {
        let spec = GridSpec::case_study();
        let tree = chain_tree(2, 1.0, -1.0);
        let p = assemble(Variant::Hard, &tree, &spec, &[2.0], &[0.0], 0.5, &opts(&spec)).unwrap();
        assert_eq!(p.binaries.len(), 4); // 2 delta + 2 beta

        let pcc =
            assemble(Variant::Chance, &tree, &spec, &[2.0], &[0.0], 0.5, &opts(&spec)).unwrap();
        assert_eq!(pcc.binaries.len(), 8); // + 2 nodes x 2 sides tau

        let prc = assemble(Variant::Risk, &tree, &spec, &[2.0], &[0.0], 0.5, &opts(&spec)).unwrap();
        assert_eq!(prc.binaries.len(), 4);
        // 2 stages x 2 sides x (2 * 1 + 1) dual variables on top of the hard
        // variant's count.
        assert_eq!(prc.num_vars - p.num_vars, 12);
    }

    /// Hand-built feasible trajectory for the case-study chain tree: the
    /// conventional unit and storage share a 1.6 pu load alongside 0.8 pu
    /// of PV.
    fn feasible_point(p: &OcpProblem, tree: &ScenarioTree, spec: &GridSpec) -> Vec<f64> {
        let vm = &p.var_map;
        let mut z = vec![0.0; p.num_vars];
        z[vm.x(0, 0)] = 2.0;
        let mut x = 2.0;
        for ip in 1..tree.node_count() {
            let i = tree.ancestor_of(ip).unwrap();
            if vm.has_input(i) {
                z[vm.u_t(i, 0)] = 0.5;
                z[vm.u_s(i, 0)] = 0.2;
                z[vm.u_r(i, 0)] = 1.5;
                z[vm.delta(i, 0)] = 1.0;
            }
            // Realized powers: p_r = min(1.5, w_r), mu splits the residual
            // imbalance evenly between the unit and the storage (K = 1).
            let w_r = tree.disturbance(ip).w_r[0];
            let w_d = tree.disturbance(ip).w_d[0];
            let p_r = w_r.min(1.5);
            let imbalance = 0.5 + 0.2 + p_r + w_d;
            let mu = -imbalance / 2.0;
            z[vm.p_r(ip, 0)] = p_r;
            z[vm.beta(ip, 0)] = if 1.5 <= w_r { 1.0 } else { 0.0 };
            z[vm.mu(ip)] = mu;
            z[vm.phi(ip, 0)] = mu;
            z[vm.p_t(ip, 0)] = 0.5 + mu;
            z[vm.p_s(ip, 0)] = 0.2 + mu;
            x -= spec.t_s * (0.2 + mu);
            z[vm.x(ip, 0)] = x;
        }
        z
    }

    #[test]
    fn feasible_trajectory_has_zero_equality_residual() {
        let spec = GridSpec::case_study();
        let tree = chain_tree(3, 0.8, -1.6);
        let p = assemble(Variant::Hard, &tree, &spec, &[2.0], &[1.0], 0.5, &opts(&spec)).unwrap();
        let z = feasible_point(&p, &tree, &spec);
        assert!(p.eq_residual(&z) <= 1e-9, "residual {}", p.eq_residual(&z));
        assert!(p.ineq_violation(&z) <= 1e-9, "violation {}", p.ineq_violation(&z));
    }

    #[test]
    fn objective_matches_direct_cost_evaluation() {
        let spec = GridSpec::case_study();
        let tree = chain_tree(3, 0.8, -1.6);
        let p = assemble(Variant::Hard, &tree, &spec, &[2.0], &[1.0], 0.5, &opts(&spec)).unwrap();
        let z = feasible_point(&p, &tree, &spec);
        let decoded = p.decode(&tree, &z);
        let direct = evaluate_cost(&tree, &spec, &[1.0], &decoded);
        assert_abs_diff_eq!(p.objective_value(&z), direct, epsilon = 1e-8);
    }

    #[test]
    fn fuel_cost_example() {
        // Single-node chain, delta = 1, p_t = 0.8 with the case-study
        // weights and no discounting: 0.1178 + 0.751 * 0.8 + (0.0693 * 0.8)^2.
        let mut spec = GridSpec::case_study();
        spec.gamma = 1.0;
        let tree = chain_tree(1, 2.0, -0.8);
        let vm = VarMap::build(Variant::Hard, &tree, &spec);
        let obj = cost_terms(&tree, &spec, &[1.0], &vm);
        let mut z = vec![0.0; vm.num_vars];
        z[vm.delta(0, 0)] = 1.0;
        z[vm.p_t(1, 0)] = 0.8;
        z[vm.p_r(1, 0)] = spec.p_r_max[0]; // zero curtailment residual
        let mut value = obj.constant;
        for (i, v) in &obj.lin {
            value += v * z[*i];
        }
        for (r, c, v) in &obj.quad {
            value += 0.5 * v * z[*r] * z[*c];
        }
        assert_abs_diff_eq!(value, 0.7216735936, epsilon = 1e-9);
    }

    #[test]
    fn switching_cost_example() {
        // delta switch 0 -> 1 contributes 0.3162^2, undiscounted.
        let mut spec = GridSpec::case_study();
        spec.gamma = 1.0;
        let tree = chain_tree(1, 2.0, -0.8);
        let vm = VarMap::build(Variant::Hard, &tree, &spec);
        let obj = cost_terms(&tree, &spec, &[0.0], &vm);
        let mut z = vec![0.0; vm.num_vars];
        z[vm.delta(0, 0)] = 1.0;
        z[vm.p_r(1, 0)] = spec.p_r_max[0];
        let mut value = obj.constant;
        for (i, v) in &obj.lin {
            value += v * z[*i];
        }
        for (r, c, v) in &obj.quad {
            value += 0.5 * v * z[*r] * z[*c];
        }
        // Fuel contributes only c_t * delta here (p_t = 0).
        assert_abs_diff_eq!(value - spec.c_t[0], 0.3162f64.powi(2), epsilon = 1e-9);
    }

    #[test]
    fn chance_stage_row_patterns() {
        // Stage with probabilities [0.6, 0.4] and alpha = 0.5: tau = (1, 0)
        // satisfies the stage row, tau = (0, 1) does not.
        let pi = [0.6, 0.4];
        let alpha = 0.5;
        let ok = pi[0] * 1.0 + pi[1] * 0.0;
        let bad = pi[0] * 0.0 + pi[1] * 1.0;
        assert!(ok >= 1.0 - alpha);
        assert!(bad < 1.0 - alpha);
    }

    #[test]
    fn big_m_validation() {
        let spec = GridSpec::case_study();
        let bad = BigMParams { m_big: 1.0, m_low: -4.0, eps: 1e-4 };
        assert!(bad.validate(&spec).is_err());
        let bad_eps = BigMParams { m_big: 4.0, m_low: -4.0, eps: 0.0 };
        assert!(bad_eps.validate(&spec).is_err());
        assert!(BigMParams::defaults(&spec).validate(&spec).is_ok());
    }

    #[test]
    fn rejects_mismatched_initial_state() {
        let spec = GridSpec::case_study();
        let tree = chain_tree(1, 1.0, -1.0);
        assert!(matches!(
            assemble(Variant::Hard, &tree, &spec, &[1.0, 2.0], &[0.0], 0.5, &opts(&spec)),
            Err(FormError::Dim(_))
        ));
    }
}
