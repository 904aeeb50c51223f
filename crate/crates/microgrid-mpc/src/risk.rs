//! Coherent risk measures on discrete random variables: value-at-risk,
//! average value-at-risk through three independent routes (the
//! Rockafellar-Uryasev minimization, the primal supremum over the
//! ambiguity set, and the conic dual representation solved as an LP).

use crate::formulation::OcpProblem;
use crate::solver::{solve_convex_qp, SolveStatus};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RiskError {
    #[error("probabilities and values have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("empty random variable")]
    Empty,
    #[error("probabilities must be nonnegative and sum to 1 (sum = {0})")]
    BadProbabilities(f64),
    #[error("alpha {0} outside [0, 1]")]
    BadAlpha(f64),
    #[error("dual LP terminated with status {0:?}")]
    DualSolve(SolveStatus),
}

/// Finitely supported random variable (cost orientation: larger is worse).
#[derive(Debug, Clone)]
pub struct DiscreteRandomVariable {
    values: Vec<f64>,
    probabilities: Vec<f64>,
}

impl DiscreteRandomVariable {
    pub fn new(values: Vec<f64>, probabilities: Vec<f64>) -> Result<Self, RiskError> {
        if values.len() != probabilities.len() {
            return Err(RiskError::LengthMismatch(values.len(), probabilities.len()));
        }
        if values.is_empty() {
            return Err(RiskError::Empty);
        }
        let sum: f64 = probabilities.iter().sum();
        if probabilities.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(RiskError::BadProbabilities(sum));
        }
        Ok(DiscreteRandomVariable { values, probabilities })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn expectation(&self) -> f64 {
        self.values
            .iter()
            .zip(&self.probabilities)
            .map(|(v, p)| v * p)
            .sum()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

fn check_alpha(alpha: f64) -> Result<(), RiskError> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(RiskError::BadAlpha(alpha))
    }
}

/// Value-at-risk at level alpha: the smallest supported value t with
/// P[X > t] <= alpha.
pub fn var_value(x: &DiscreteRandomVariable, alpha: f64) -> Result<f64, RiskError> {
    check_alpha(alpha)?;
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x.values[a].total_cmp(&x.values[b]));
    // Scan ascending, tracking P[X > t] as mass strictly above the
    // candidate.
    let mut best = x.max();
    let mut k = x.len();
    while k > 0 {
        // Candidate t = value at order[k-1]; tail is everything strictly
        // above it.
        let t = x.values[order[k - 1]];
        let tail: f64 = order
            .iter()
            .filter(|&&i| x.values[i] > t)
            .map(|&i| x.probabilities[i])
            .sum();
        if tail <= alpha + 1e-12 {
            best = t;
        } else {
            break;
        }
        k -= 1;
    }
    Ok(best)
}

/// Average value-at-risk via the Rockafellar-Uryasev form
/// min_t t + E[(X - t)+] / alpha, minimized over the supported values.
pub fn avar_rockafellar(x: &DiscreteRandomVariable, alpha: f64) -> Result<f64, RiskError> {
    check_alpha(alpha)?;
    if alpha == 0.0 {
        return Ok(x.max());
    }
    let mut best = f64::INFINITY;
    for &t in &x.values {
        let excess: f64 = x
            .values
            .iter()
            .zip(&x.probabilities)
            .map(|(v, p)| p * (v - t).max(0.0))
            .sum();
        best = best.min(t + excess / alpha);
    }
    Ok(best)
}

/// Average value-at-risk via the primal supremum over the ambiguity set
/// { mu : sum mu = 1, 0 <= alpha mu <= pi }: the maximizer loads mass
/// greedily on the worst outcomes up to the per-outcome cap pi / alpha.
pub fn avar_primal_sup(x: &DiscreteRandomVariable, alpha: f64) -> Result<f64, RiskError> {
    check_alpha(alpha)?;
    if alpha == 0.0 {
        return Ok(x.max());
    }
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x.values[b].total_cmp(&x.values[a]).then(a.cmp(&b)));
    let mut remaining = 1.0;
    let mut total = 0.0;
    for &i in &order {
        if remaining <= 0.0 {
            break;
        }
        let cap = x.probabilities[i] / alpha;
        let mass = cap.min(remaining);
        total += mass * x.values[i];
        remaining -= mass;
    }
    Ok(total)
}

/// Conic representation of the ambiguity set of AV@R at level alpha:
/// { mu : E mu + F b_free <=_K b } with E = [I; -I; 1'], no free block,
/// b = [pi / alpha; 0; 1] and K = nonnegative orthant x {0}.
#[derive(Debug, Clone)]
pub struct AmbiguityConicRep {
    /// (2n + 1) x n coefficient matrix of the measure variable.
    pub e: Vec<Vec<f64>>,
    /// (2n + 1) x 0: the representation has no free column.
    pub f_cols: usize,
    pub b: Vec<f64>,
    /// Number of leading rows in the nonnegative cone; the final row is an
    /// equality (zero cone).
    pub nonneg_rows: usize,
}

pub fn avar_conic_rep(probabilities: &[f64], alpha: f64) -> Result<AmbiguityConicRep, RiskError> {
    check_alpha(alpha)?;
    let n = probabilities.len();
    if n == 0 {
        return Err(RiskError::Empty);
    }
    let mut e = vec![vec![0.0; n]; 2 * n + 1];
    for i in 0..n {
        e[i][i] = 1.0;
        e[n + i][i] = -1.0;
        e[2 * n][i] = 1.0;
    }
    let mut b = vec![0.0; 2 * n + 1];
    for i in 0..n {
        // At alpha = 0 the cap pi / alpha is vacuous and the ambiguity set
        // is the full simplex; encoded with infinite caps.
        b[i] = if alpha == 0.0 { f64::INFINITY } else { probabilities[i] / alpha };
    }
    b[2 * n] = 1.0;
    Ok(AmbiguityConicRep { e, f_cols: 0, b, nonneg_rows: 2 * n })
}

/// Average value-at-risk via the dual of the conic representation,
///
/// ```text
///     min  y' b   s.t.  E' y = c,  y_1..y_2n >= 0,
/// ```
///
/// assembled as an LP and handed to the QP engine.
pub fn risk_value_dual(x: &DiscreteRandomVariable, alpha: f64) -> Result<f64, RiskError> {
    check_alpha(alpha)?;
    let rep = avar_conic_rep(x.probabilities(), alpha)?;
    let n = x.len();
    let rows = 2 * n + 1;
    let mut prob = OcpProblem::continuous(rows);
    for (i, bi) in rep.b.iter().enumerate() {
        // Rows with an infinite cap force y_i = 0; drop them from the
        // objective and pin the variable instead.
        prob.lin[i] = if bi.is_finite() { *bi } else { 0.0 };
    }
    // E' y = values.
    prob.a_eq.nrows = n;
    for (r, row) in rep.e.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            if v != 0.0 {
                prob.a_eq.push(c, r, v);
            }
        }
    }
    prob.b_eq = x.values().to_vec();
    // Cone constraints on y.
    prob.g_ineq.nrows = rep.nonneg_rows;
    for i in 0..rep.nonneg_rows {
        prob.g_ineq.push(i, i, 1.0);
        prob.l_ineq.push(0.0);
        let cap_infinite = !rep.b[i].is_finite();
        prob.u_ineq.push(if cap_infinite { 0.0 } else { f64::INFINITY });
    }
    let sol = solve_convex_qp(&prob, None);
    if sol.status != SolveStatus::Optimal {
        return Err(RiskError::DualSolve(sol.status));
    }
    Ok(sol.objective)
}
