//! Operator-splitting (ADMM) engine for convex QPs of the form
//!
//! ```text
//!     minimize    0.5 x' P x + q' x
//!     subject to  l <= A x <= u
//! ```
//!
//! with equality rows folded into l = u. The implementation follows the
//! OSQP algorithm: Ruiz equilibration, a cached Cholesky factorization of
//! P + sigma I + A' diag(rho) A, over-relaxed iterates, adaptive step size
//! with refactorization, primal/dual infeasibility certificates and an
//! active-set polish step with iterative refinement.

use crate::formulation::OcpProblem;
use nalgebra::{DMatrix, DVector, Dyn};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Solved,
    MaxIterations,
    PrimalInfeasible,
    DualInfeasible,
}

#[derive(Debug, Clone, Copy)]
pub struct QpOptions {
    pub eps_abs: f64,
    pub eps_rel: f64,
    /// Loose tolerance at which the active-set polish is attempted; the
    /// loop only runs to `eps_abs`/`eps_rel` when polishing fails.
    pub eps_polish_trigger: f64,
    pub eps_infeas: f64,
    pub max_iter: usize,
    pub sigma: f64,
    pub alpha: f64,
    pub rho0: f64,
    /// Step-size multiplier for rows that are equalities in the base
    /// problem.
    pub rho_eq_scale: f64,
    pub adaptive_rho: bool,
    pub polish: bool,
    pub scaling_iters: usize,
    pub check_interval: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        QpOptions {
            eps_abs: 1e-6,
            eps_rel: 1e-6,
            eps_polish_trigger: 1e-3,
            eps_infeas: 1e-4,
            max_iter: 50_000,
            sigma: 1e-6,
            alpha: 1.6,
            rho0: 0.1,
            rho_eq_scale: 1e3,
            adaptive_rho: true,
            polish: true,
            scaling_iters: 10,
            check_interval: 25,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub status: QpStatus,
    pub x: Vec<f64>,
    /// Dual multipliers of the stacked constraint rows.
    pub y: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

/// Engine with a reusable factorization; `solve` may be called repeatedly
/// with different bound overrides (branch-and-bound node fixings).
pub struct QpSolver {
    n: usize,
    m: usize,
    m_eq: usize,
    // Unscaled data, used for termination checks, polish and objectives.
    p0: DMatrix<f64>,
    q0: DVector<f64>,
    a0: DMatrix<f64>,
    l0: DVector<f64>,
    u0: DVector<f64>,
    obj_const: f64,
    // Ruiz-equilibrated data used by the iteration.
    ps: DMatrix<f64>,
    qs: DVector<f64>,
    as_: DMatrix<f64>,
    d: DVector<f64>,
    e: DVector<f64>,
    c_cost: f64,
    rho_bar: f64,
    rho: DVector<f64>,
    eq_like: Vec<bool>,
    kkt: nalgebra::Cholesky<f64, Dyn>,
    // Row-compressed copies of the sparse operators for the hot loop; the
    // dense forms above are kept for factorization and polish.
    a0_rows: RowSparse,
    as_rows: RowSparse,
    p0_rows: RowSparse,
    opts: QpOptions,
}

/// Minimal compressed-row matrix supporting the products the iteration
/// needs; the constraint matrices here are far too sparse for dense
/// mat-vecs to be economical.
struct RowSparse {
    ncols: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl RowSparse {
    fn from_dense(mat: &DMatrix<f64>) -> Self {
        let rows = (0..mat.nrows())
            .map(|i| {
                (0..mat.ncols())
                    .filter_map(|j| {
                        let v = mat[(i, j)];
                        (v != 0.0).then_some((j, v))
                    })
                    .collect()
            })
            .collect();
        RowSparse { ncols: mat.ncols(), rows }
    }

    fn mul(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.rows.len(),
            self.rows
                .iter()
                .map(|row| row.iter().map(|&(j, a)| a * v[j]).sum()),
        )
    }

    fn tr_mul(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.ncols);
        for (i, row) in self.rows.iter().enumerate() {
            let vi = v[i];
            if vi != 0.0 {
                for &(j, a) in row {
                    out[j] += a * vi;
                }
            }
        }
        out
    }
}

fn amax0(v: &DVector<f64>) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.amax()
    }
}

fn clamp_scale(norm: f64) -> f64 {
    if norm < 1e-8 {
        1.0
    } else {
        (1.0 / norm.sqrt()).clamp(1e-4, 1e4)
    }
}

impl QpSolver {
    pub fn new(prob: &OcpProblem, opts: QpOptions) -> Self {
        let n = prob.num_vars;
        let m_eq = prob.a_eq.nrows;
        let m = m_eq + prob.g_ineq.nrows;

        let p0 = prob.quad.to_dense();
        let q0 = DVector::from_column_slice(&prob.lin);
        let mut a0 = DMatrix::zeros(m, n);
        for &(r, c, v) in &prob.a_eq.triplets {
            a0[(r, c)] += v;
        }
        for &(r, c, v) in &prob.g_ineq.triplets {
            a0[(m_eq + r, c)] += v;
        }
        let mut l0 = DVector::zeros(m);
        let mut u0 = DVector::zeros(m);
        for i in 0..m_eq {
            l0[i] = prob.b_eq[i];
            u0[i] = prob.b_eq[i];
        }
        for i in 0..prob.g_ineq.nrows {
            l0[m_eq + i] = prob.l_ineq[i];
            u0[m_eq + i] = prob.u_ineq[i];
        }

        // Ruiz equilibration with cost scaling.
        let mut ps = p0.clone();
        let mut qs = q0.clone();
        let mut as_ = a0.clone();
        let mut d = DVector::from_element(n, 1.0);
        let mut e = DVector::from_element(m, 1.0);
        let mut c_cost = 1.0;
        for _ in 0..opts.scaling_iters {
            let mut dj = DVector::from_element(n, 1.0);
            for j in 0..n {
                let np = ps.column(j).amax();
                let na = if m > 0 { as_.column(j).amax() } else { 0.0 };
                dj[j] = clamp_scale(np.max(na));
            }
            let mut ei = DVector::from_element(m, 1.0);
            for i in 0..m {
                ei[i] = clamp_scale(as_.row(i).amax());
            }
            for j in 0..n {
                for k in 0..n {
                    ps[(k, j)] *= dj[k] * dj[j];
                }
                qs[j] *= dj[j];
            }
            for i in 0..m {
                for j in 0..n {
                    as_[(i, j)] *= ei[i] * dj[j];
                }
            }
            d.component_mul_assign(&dj);
            e.component_mul_assign(&ei);
            // Scale the cost so gradient magnitudes stay near unity.
            let mean_p = if n > 0 {
                (0..n).map(|j| ps.column(j).amax()).sum::<f64>() / n as f64
            } else {
                0.0
            };
            let g = clamp_scale(mean_p.max(qs.amax()).max(1e-8)).powi(2);
            ps *= g;
            qs *= g;
            c_cost *= g;
        }

        let eq_like: Vec<bool> = (0..m)
            .map(|i| i < m_eq || (l0[i].is_finite() && l0[i] == u0[i]))
            .collect();
        let rho_bar = opts.rho0;
        let rho = Self::rho_vector(&eq_like, rho_bar, opts.rho_eq_scale);
        let kkt = Self::factorize(&ps, &as_, &rho, opts.sigma);
        let a0_rows = RowSparse::from_dense(&a0);
        let as_rows = RowSparse::from_dense(&as_);
        let p0_rows = RowSparse::from_dense(&p0);

        QpSolver {
            n,
            m,
            m_eq,
            p0,
            q0,
            a0,
            l0,
            u0,
            obj_const: prob.constant,
            ps,
            qs,
            as_,
            d,
            e,
            c_cost,
            rho_bar,
            rho,
            eq_like,
            kkt,
            a0_rows,
            as_rows,
            p0_rows,
            opts,
        }
    }

    fn rho_vector(eq_like: &[bool], rho_bar: f64, eq_scale: f64) -> DVector<f64> {
        DVector::from_iterator(
            eq_like.len(),
            eq_like
                .iter()
                .map(|&is_eq| if is_eq { rho_bar * eq_scale } else { rho_bar }),
        )
    }

    fn factorize(
        ps: &DMatrix<f64>,
        as_: &DMatrix<f64>,
        rho: &DVector<f64>,
        sigma: f64,
    ) -> nalgebra::Cholesky<f64, Dyn> {
        let n = ps.ncols();
        let mut kkt = ps.clone();
        for j in 0..n {
            kkt[(j, j)] += sigma;
        }
        // kkt += A' diag(rho) A
        for i in 0..as_.nrows() {
            let row = as_.row(i);
            for j in 0..n {
                let aij = row[j];
                if aij == 0.0 {
                    continue;
                }
                for k in 0..n {
                    kkt[(j, k)] += rho[i] * aij * row[k];
                }
            }
        }
        nalgebra::Cholesky::new(kkt).expect("reduced KKT matrix must be positive definite")
    }

    pub fn num_vars(&self) -> usize {
        self.n
    }

    pub fn num_rows(&self) -> usize {
        self.m
    }

    /// Row index of an inequality row in the stacked system.
    pub fn g_row(&self, g_row: usize) -> usize {
        self.m_eq + g_row
    }

    /// Solve with per-row bound overrides (indices into the inequality
    /// block). `warm` carries an unscaled primal/dual pair.
    pub fn solve(
        &mut self,
        overrides: &[(usize, f64, f64)],
        warm: Option<(&[f64], &[f64])>,
    ) -> QpSolution {
        let mut l = self.l0.clone();
        let mut u = self.u0.clone();
        for &(g_row, lo, hi) in overrides {
            let i = self.m_eq + g_row;
            l[i] = lo;
            u[i] = hi;
        }
        // Rows pinned to a point by the overrides behave like equalities;
        // give them the equality step size and refactorize if the pattern
        // changed, otherwise the iteration enforces them very slowly.
        let eq_like: Vec<bool> = (0..self.m)
            .map(|i| i < self.m_eq || (l[i].is_finite() && l[i] == u[i]))
            .collect();
        if eq_like != self.eq_like {
            self.eq_like = eq_like;
            self.rho = Self::rho_vector(&self.eq_like, self.rho_bar, self.opts.rho_eq_scale);
            self.kkt = Self::factorize(&self.ps, &self.as_, &self.rho, self.opts.sigma);
        }
        for i in 0..self.m {
            if l[i] > u[i] + 1e-12 {
                return QpSolution {
                    status: QpStatus::PrimalInfeasible,
                    x: vec![0.0; self.n],
                    y: vec![0.0; self.m],
                    objective: f64::INFINITY,
                    iterations: 0,
                    primal_residual: l[i] - u[i],
                    dual_residual: 0.0,
                };
            }
        }
        let ls = l.component_mul(&self.e);
        let us = u.component_mul(&self.e);

        let mut x = DVector::zeros(self.n);
        let mut y = DVector::zeros(self.m);
        if let Some((wx, wy)) = warm {
            for j in 0..self.n {
                x[j] = wx[j] / self.d[j];
            }
            for i in 0..self.m {
                y[i] = self.c_cost * wy[i] / self.e[i];
            }
        }
        let mut z = self.as_rows.mul(&x).zip_zip_map(&ls, &us, |v, lo, hi| v.clamp(lo, hi));

        let mut status = QpStatus::MaxIterations;
        let mut iterations = self.opts.max_iter;
        let mut rp = f64::INFINITY;
        let mut rd = f64::INFINITY;
        let alpha = self.opts.alpha;
        let mut rho_updates = 0usize;
        let mut polish_attempts = 0usize;
        let mut polished: Option<(DVector<f64>, DVector<f64>)> = None;
        let mut x_check = x.clone();
        let mut y_check = y.clone();

        for k in 1..=self.opts.max_iter {
            // x-update via the cached factorization.
            let rhs = self.opts.sigma * &x - &self.qs
                + self.as_rows.tr_mul(&(self.rho.component_mul(&z) - &y));
            let x_tilde = self.kkt.solve(&rhs);
            let z_tilde = self.as_rows.mul(&x_tilde);
            let x_next = alpha * &x_tilde + (1.0 - alpha) * &x;
            let z_relax = alpha * &z_tilde + (1.0 - alpha) * &z;
            let z_next = (0..self.m)
                .map(|i| (z_relax[i] + y[i] / self.rho[i]).clamp(ls[i], us[i]))
                .collect::<Vec<f64>>();
            let z_next = DVector::from_vec(z_next);
            let y_next = &y + self.rho.component_mul(&(&z_relax - &z_next));

            let dx = &x_next - &x;
            let dy = &y_next - &y;
            x = x_next;
            z = z_next;
            y = y_next;

            if k % self.opts.check_interval != 0 && k != self.opts.max_iter {
                continue;
            }

            // Unscaled iterates and residuals.
            let xu = x.component_mul(&self.d);
            let zu = z.component_div(&self.e);
            let yu = y.component_mul(&self.e) / self.c_cost;
            let ax = self.a0_rows.mul(&xu);
            let px = self.p0_rows.mul(&xu);
            let aty = self.a0_rows.tr_mul(&yu);
            rp = amax0(&(&ax - &zu));
            rd = (&px + &self.q0 + &aty).amax();
            let eps_prim = self.opts.eps_abs + self.opts.eps_rel * amax0(&ax).max(amax0(&zu));
            let eps_dual = self.opts.eps_abs
                + self.opts.eps_rel * px.amax().max(aty.amax()).max(self.q0.amax());
            if rp <= eps_prim && rd <= eps_dual {
                status = QpStatus::Solved;
                iterations = k;
                break;
            }

            // Try the polish early: once the iterate is roughly converged
            // the active set is usually correct and the KKT re-solve lands
            // at full accuracy immediately.
            if self.opts.polish && polish_attempts < 2 {
                let loose = self.opts.eps_polish_trigger;
                let loose_prim = loose * (1.0 + amax0(&ax).max(amax0(&zu)));
                let loose_dual =
                    loose * (1.0 + px.amax().max(aty.amax()).max(self.q0.amax()));
                if rp <= loose_prim && rd <= loose_dual {
                    polish_attempts += 1;
                    if let Some((pxv, pyv, prp, prd)) = self.polish(&xu, &yu, &l, &u) {
                        if std::env::var("QP_DEBUG").is_ok() {
                            eprintln!(
                                "polish attempt {polish_attempts} at k={k}: rp {rp:.2e} rd {rd:.2e} -> prp {prp:.2e} prd {prd:.2e} (eps {eps_prim:.2e}/{eps_dual:.2e})"
                            );
                        }
                        if prp <= eps_prim && prd <= eps_dual {
                            polished = Some((pxv, pyv));
                            rp = prp;
                            rd = prd;
                            status = QpStatus::Solved;
                            iterations = k;
                            break;
                        }
                    }
                }
            }

            // Infeasibility certificates, from the last step and from the
            // accumulated movement since the previous check; the latter
            // averages out per-iteration noise and certifies much earlier.
            let dxu = dx.component_mul(&self.d);
            let dyu = dy.component_mul(&self.e) / self.c_cost;
            let dxc = (&x - &x_check).component_mul(&self.d);
            let dyc = (&y - &y_check).component_mul(&self.e) / self.c_cost;
            x_check = x.clone();
            y_check = y.clone();
            if self.primal_infeasible(&dyu, &l, &u) || self.primal_infeasible(&dyc, &l, &u) {
                status = QpStatus::PrimalInfeasible;
                iterations = k;
                break;
            }
            if self.dual_infeasible(&dxu, &l, &u) || self.dual_infeasible(&dxc, &l, &u) {
                status = QpStatus::DualInfeasible;
                iterations = k;
                break;
            }

            // Adaptive step size.
            if self.opts.adaptive_rho && rho_updates < 10 {
                let prim_rel = rp / (amax0(&ax).max(amax0(&zu)).max(1e-10));
                let dual_rel =
                    rd / (px.amax().max(aty.amax()).max(self.q0.amax()).max(1e-10));
                let ratio = (prim_rel / dual_rel.max(1e-16)).sqrt();
                if ratio > 5.0 || ratio < 0.2 {
                    self.rho_bar = (self.rho_bar * ratio).clamp(1e-6, 1e6);
                    self.rho =
                        Self::rho_vector(&self.eq_like, self.rho_bar, self.opts.rho_eq_scale);
                    self.kkt = Self::factorize(&self.ps, &self.as_, &self.rho, self.opts.sigma);
                    rho_updates += 1;
                }
            }
        }

        let was_polished = polished.is_some();
        let (mut xu, mut yu) = match polished {
            Some((px, py)) => (px, py),
            None => (
                x.component_mul(&self.d),
                y.component_mul(&self.e) / self.c_cost,
            ),
        };
        if status == QpStatus::Solved && self.opts.polish && !was_polished {
            if let Some((px, py, prp, prd)) = self.polish(&xu, &yu, &l, &u) {
                if prp.max(prd) <= rp.max(rd) {
                    xu = px;
                    yu = py;
                    rp = prp;
                    rd = prd;
                }
            }
        }

        let objective = if status == QpStatus::Solved || status == QpStatus::MaxIterations {
            0.5 * self.p0_rows.mul(&xu).dot(&xu) + self.q0.dot(&xu) + self.obj_const
        } else if status == QpStatus::PrimalInfeasible {
            f64::INFINITY
        } else {
            f64::NEG_INFINITY
        };

        QpSolution {
            status,
            x: xu.as_slice().to_vec(),
            y: yu.as_slice().to_vec(),
            objective,
            iterations,
            primal_residual: rp,
            dual_residual: rd,
        }
    }

    fn primal_infeasible(&self, dy: &DVector<f64>, l: &DVector<f64>, u: &DVector<f64>) -> bool {
        let norm = amax0(dy);
        if norm <= 1e-12 {
            return false;
        }
        let eps = self.opts.eps_infeas * norm;
        if self.a0_rows.tr_mul(dy).amax() > eps {
            return false;
        }
        let mut support = 0.0;
        for i in 0..self.m {
            let v = dy[i];
            if v > eps {
                if !u[i].is_finite() {
                    return false;
                }
                support += u[i] * v;
            } else if v < -eps {
                if !l[i].is_finite() {
                    return false;
                }
                support += l[i] * v;
            }
        }
        support < -eps
    }

    fn dual_infeasible(&self, dx: &DVector<f64>, l: &DVector<f64>, u: &DVector<f64>) -> bool {
        let norm = dx.amax();
        if norm <= 1e-12 {
            return false;
        }
        let eps = self.opts.eps_infeas * norm;
        if self.p0_rows.mul(dx).amax() > eps {
            return false;
        }
        if self.q0.dot(dx) >= -eps {
            return false;
        }
        let adx = self.a0_rows.mul(dx);
        for i in 0..self.m {
            let grows = adx[i] > eps;
            let shrinks = adx[i] < -eps;
            if (grows && u[i].is_finite()) || (shrinks && l[i].is_finite()) {
                return false;
            }
        }
        true
    }

    /// Active-set polish: re-solve the equality-constrained KKT system on
    /// the rows marked active, with iterative refinement against the
    /// unregularized system. A row counts as active when the iterate sits
    /// near its bound and the dual sign agrees; dual noise alone is not
    /// enough, so this stays reliable on loosely converged iterates.
    fn polish(
        &self,
        xu: &DVector<f64>,
        y: &DVector<f64>,
        l: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Option<(DVector<f64>, DVector<f64>, f64, f64)> {
        let ax = self.a0_rows.mul(xu);
        let dual_tol = (1e-6 * y.amax()).max(1e-9);
        let slack = |b: f64| 1e-3 * (1.0 + b.abs());
        let mut active: Vec<(usize, f64)> = Vec::new();
        for i in 0..self.m {
            if l[i].is_finite() && l[i] == u[i] {
                active.push((i, l[i]));
            } else if y[i] > dual_tol && u[i].is_finite() && u[i] - ax[i] < slack(u[i]) {
                active.push((i, u[i]));
            } else if y[i] < -dual_tol && l[i].is_finite() && ax[i] - l[i] < slack(l[i]) {
                active.push((i, l[i]));
            }
        }
        // The active set guessed from a loose iterate is often incomplete;
        // repair it by adding violated rows and dropping rows whose
        // multiplier sign disagrees, re-solving a handful of times.
        let mut best: Option<(DVector<f64>, DVector<f64>, f64, f64)> = None;
        for _pass in 0..3 {
            let (xp, yp) = self.solve_active_kkt(&active)?;
            let axp = self.a0_rows.mul(&xp);
            let rp = (0..self.m)
                .map(|i| (l[i] - axp[i]).max(axp[i] - u[i]).max(0.0))
                .fold(0.0f64, f64::max);
            // A multiplier with the wrong sign makes the point a KKT point
            // of the equality-constrained subproblem only, so count it as
            // dual error.
            let sign_viol = active
                .iter()
                .filter(|&&(row, _)| !(l[row].is_finite() && l[row] == u[row]))
                .map(|&(row, bound)| {
                    if bound == u[row] {
                        (-yp[row]).max(0.0)
                    } else {
                        yp[row].max(0.0)
                    }
                })
                .fold(0.0f64, f64::max);
            let rd = (self.p0_rows.mul(&xp) + &self.q0 + self.a0_rows.tr_mul(&yp))
                .amax()
                .max(sign_viol);
            let better = best.as_ref().map_or(true, |b| rp.max(rd) < b.2.max(b.3));
            if better {
                best = Some((xp.clone(), yp.clone(), rp, rd));
            }
            let tol = 1e-8;
            let mut changed = false;
            active.retain(|&(row, bound)| {
                let eq = l[row].is_finite() && l[row] == u[row];
                let wrong_sign = !eq
                    && ((bound == u[row] && yp[row] < -tol)
                        || (bound == l[row] && yp[row] > tol));
                if wrong_sign {
                    changed = true;
                }
                !wrong_sign
            });
            for i in 0..self.m {
                if active.iter().any(|&(row, _)| row == i) {
                    continue;
                }
                if u[i].is_finite() && axp[i] > u[i] + tol {
                    active.push((i, u[i]));
                    changed = true;
                } else if l[i].is_finite() && axp[i] < l[i] - tol {
                    active.push((i, l[i]));
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        best
    }

    /// Solve the equality-constrained KKT system for a fixed active set,
    /// with diagonal regularization and iterative refinement.
    fn solve_active_kkt(
        &self,
        active: &[(usize, f64)],
    ) -> Option<(DVector<f64>, DVector<f64>)> {
        let k = active.len();
        let dim = self.n + k;
        let reg = 1e-9;
        let mut kkt = DMatrix::zeros(dim, dim);
        for r in 0..self.n {
            for c in 0..self.n {
                kkt[(r, c)] = self.p0[(r, c)];
            }
        }
        for (idx, &(row, _)) in active.iter().enumerate() {
            for c in 0..self.n {
                kkt[(self.n + idx, c)] = self.a0[(row, c)];
                kkt[(c, self.n + idx)] = self.a0[(row, c)];
            }
        }
        for r in 0..self.n {
            kkt[(r, r)] += reg;
        }
        for idx in 0..k {
            kkt[(self.n + idx, self.n + idx)] -= reg;
        }
        let lu = kkt.clone().lu();
        let mut rhs = DVector::zeros(dim);
        for j in 0..self.n {
            rhs[j] = -self.q0[j];
        }
        for (idx, &(_, bound)) in active.iter().enumerate() {
            rhs[self.n + idx] = bound;
        }
        let mut sol = lu.solve(&rhs)?;
        for _ in 0..3 {
            // Residual against the unregularized KKT: undo the diagonal
            // regularization term instead of storing a second matrix.
            let mut resid = &rhs - &kkt * &sol;
            for j in 0..self.n {
                resid[j] += reg * sol[j];
            }
            for idx in 0..k {
                resid[self.n + idx] -= reg * sol[self.n + idx];
            }
            let corr = lu.solve(&resid)?;
            sol += corr;
        }
        let xp = DVector::from_iterator(self.n, (0..self.n).map(|j| sol[j]));
        let mut yp = DVector::zeros(self.m);
        for (idx, &(row, _)) in active.iter().enumerate() {
            yp[row] = sol[self.n + idx];
        }
        Some((xp, yp))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formulation::OcpProblem;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn solve(prob: &OcpProblem) -> QpSolution {
        QpSolver::new(prob, QpOptions::default()).solve(&[], None)
    }

    #[test]
    fn scalar_bound_becomes_active() {
        // min (z - 1)^2 s.t. z >= 2 -> z = 2, objective 1.
        let mut p = OcpProblem::continuous(1);
        p.quad.push(0, 0, 2.0);
        p.lin[0] = -2.0;
        p.constant = 1.0;
        p.g_ineq.nrows = 1;
        p.g_ineq.push(0, 0, 1.0);
        p.l_ineq.push(2.0);
        p.u_ineq.push(f64::INFINITY);
        let sol = solve(&p);
        assert_eq!(sol.status, QpStatus::Solved);
        assert_abs_diff_eq!(sol.x[0], 2.0, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.objective, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn equality_constrained_symmetric_qp() {
        // min 0.5 (x^2 + y^2) s.t. x + y = 2 -> (1, 1).
        let mut p = OcpProblem::continuous(2);
        p.quad.push(0, 0, 1.0);
        p.quad.push(1, 1, 1.0);
        p.a_eq.nrows = 1;
        p.a_eq.push(0, 0, 1.0);
        p.a_eq.push(0, 1, 1.0);
        p.b_eq.push(2.0);
        let sol = solve(&p);
        assert_eq!(sol.status, QpStatus::Solved);
        assert_abs_diff_eq!(sol.x[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.x[1], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.objective, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn detects_primal_infeasibility() {
        // x >= 1 and x <= 0 cannot both hold.
        let mut p = OcpProblem::continuous(1);
        p.quad.push(0, 0, 2.0);
        p.g_ineq.nrows = 2;
        p.g_ineq.push(0, 0, 1.0);
        p.g_ineq.push(1, 0, 1.0);
        p.l_ineq.extend([1.0, f64::NEG_INFINITY]);
        p.u_ineq.extend([f64::INFINITY, 0.0]);
        let sol = solve(&p);
        assert_eq!(sol.status, QpStatus::PrimalInfeasible);
    }

    #[test]
    fn detects_unboundedness() {
        // min x s.t. x <= 0 is unbounded below.
        let mut p = OcpProblem::continuous(1);
        p.lin[0] = 1.0;
        p.g_ineq.nrows = 1;
        p.g_ineq.push(0, 0, 1.0);
        p.l_ineq.push(f64::NEG_INFINITY);
        p.u_ineq.push(0.0);
        let sol = solve(&p);
        assert_eq!(sol.status, QpStatus::DualInfeasible);
    }

    #[test]
    fn bound_overrides_pin_variables() {
        // min (x - 0.3)^2 with box x in [0, 1]; override pinches to x = 1.
        let mut p = OcpProblem::continuous(1);
        p.quad.push(0, 0, 2.0);
        p.lin[0] = -0.6;
        p.g_ineq.nrows = 1;
        p.g_ineq.push(0, 0, 1.0);
        p.l_ineq.push(0.0);
        p.u_ineq.push(1.0);
        let mut solver = QpSolver::new(&p, QpOptions::default());
        let free = solver.solve(&[], None);
        assert_abs_diff_eq!(free.x[0], 0.3, epsilon = 1e-6);
        let pinned = solver.solve(&[(0, 1.0, 1.0)], None);
        assert_abs_diff_eq!(pinned.x[0], 1.0, epsilon = 1e-6);
        // And the base bounds are restored afterwards.
        let free_again = solver.solve(&[], None);
        assert_abs_diff_eq!(free_again.x[0], 0.3, epsilon = 1e-6);
    }

    #[test]
    fn simplex_lp() {
        // min -x1 - 2 x2 over the probability simplex -> (0, 1).
        let mut p = OcpProblem::continuous(2);
        p.lin = vec![-1.0, -2.0];
        p.a_eq.nrows = 1;
        p.a_eq.push(0, 0, 1.0);
        p.a_eq.push(0, 1, 1.0);
        p.b_eq.push(1.0);
        p.g_ineq.nrows = 2;
        p.g_ineq.push(0, 0, 1.0);
        p.g_ineq.push(1, 1, 1.0);
        p.l_ineq.extend([0.0, 0.0]);
        p.u_ineq.extend([f64::INFINITY, f64::INFINITY]);
        let sol = solve(&p);
        assert_eq!(sol.status, QpStatus::Solved);
        assert_abs_diff_eq!(sol.x[1], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.objective, -2.0, epsilon = 1e-6);
    }

    /// Random strictly convex equality-constrained QPs cross-checked
    /// against the direct KKT solve.
    #[test]
    fn matches_direct_kkt_solutions() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let n = rng.gen_range(2..8);
            let me = rng.gen_range(1..n);
            let mut m = DMatrix::<f64>::zeros(n, n);
            for r in 0..n {
                for c in 0..n {
                    m[(r, c)] = rng.gen_range(-1.0..1.0);
                }
            }
            let pm = &m * m.transpose() + DMatrix::identity(n, n);
            let q = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let a = DMatrix::from_fn(me, n, |_, _| rng.gen_range(-1.0..1.0));
            let b = DVector::from_fn(me, |_, _| rng.gen_range(-1.0..1.0));

            let mut prob = OcpProblem::continuous(n);
            for r in 0..n {
                for c in 0..n {
                    prob.quad.push(r, c, pm[(r, c)]);
                }
                prob.lin[r] = q[r];
            }
            prob.a_eq.nrows = me;
            for r in 0..me {
                for c in 0..n {
                    prob.a_eq.push(r, c, a[(r, c)]);
                }
                prob.b_eq.push(b[r]);
            }
            let sol = solve(&prob);
            assert_eq!(sol.status, QpStatus::Solved);

            let mut kkt = DMatrix::zeros(n + me, n + me);
            kkt.view_mut((0, 0), (n, n)).copy_from(&pm);
            kkt.view_mut((n, 0), (me, n)).copy_from(&a);
            kkt.view_mut((0, n), (n, me)).copy_from(&a.transpose());
            let mut rhs = DVector::zeros(n + me);
            rhs.rows_mut(0, n).copy_from(&(-&q));
            rhs.rows_mut(n, me).copy_from(&b);
            let direct = kkt.lu().solve(&rhs).unwrap();
            for j in 0..n {
                assert_abs_diff_eq!(sol.x[j], direct[j], epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn warm_start_converges_faster() {
        let mut p = OcpProblem::continuous(3);
        for j in 0..3 {
            p.quad.push(j, j, 2.0 + j as f64);
            p.lin[j] = -1.0;
        }
        p.g_ineq.nrows = 3;
        for j in 0..3 {
            p.g_ineq.push(j, j, 1.0);
            p.l_ineq.push(0.0);
            p.u_ineq.push(0.4);
        }
        let mut solver = QpSolver::new(&p, QpOptions::default());
        let cold = solver.solve(&[], None);
        let warm = solver.solve(&[], Some((&cold.x, &cold.y)));
        assert_eq!(warm.status, QpStatus::Solved);
        assert!(warm.iterations <= cold.iterations);
    }
}
