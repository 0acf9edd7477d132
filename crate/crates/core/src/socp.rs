//! Primal-dual interior-point solver for the min-UE power allocation cone
//! program.
//!
//! Decision vector, in normalized units `omega = Omega / p_total`:
//! `x = [omega (KL), slack (KL), upsilon (one per UE and AP pair l < l')]`.
//! The program is
//!
//! ```text
//! maximize   sum_i sum_l c_ill omega_il + 2 sum_i sum_{l<l'} c_ill' upsilon_ill'
//! subject to upsilon - sqrt(omega_il omega_il') <= 0,
//!            -omega <= 0, -slack <= 0, sum(omega) - 1 <= 0,
//!            omega + slack = 1.
//! ```
//!
//! Diagonal cones collapse to `omega_il` itself, the symmetric pair
//! `(l', l)` shares the auxiliary of `(l, l')`, and pairs with a zero
//! coefficient are dropped.
//!
//! The cone is written through the geometric mean rather than as
//! `upsilon^2 - omega omega'`. Both describe the same set here, but at the
//! optimum every UE other than the best one is switched off, and there the
//! product form has a vanishing gradient and no finite multiplier.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::channel::LargeScaleState;
use crate::eh_stats::{xi_term, PowerAllocation};
use crate::error::{Error, Result};

/// Which linear solver computes the Newton direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NewtonMethod {
    /// Block elimination exploiting the per-UE structure.
    Structured,
    /// Dense LU of the full KKT matrix.
    Dense,
    /// Dense LU followed by two rounds of iterative refinement.
    Refined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// Barrier growth factor; `1 + 1/sqrt(m)` when absent.
    pub rho: Option<f64>,
    /// Minimum fractional residual decrease accepted by the line search.
    pub beta_ls: f64,
    /// Step reduction factor of the line search.
    pub q_ls: f64,
    /// Target surrogate gap.
    pub eps: f64,
    /// Target primal and dual residual norms.
    pub eps_feas: f64,
    pub max_iter: usize,
    pub newton: NewtonMethod,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            rho: None,
            beta_ls: 0.01,
            q_ls: 0.5,
            eps: 1e-8,
            eps_feas: 1e-9,
            max_iter: 5000,
            newton: NewtonMethod::Structured,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if let Some(r) = self.rho {
            if !(r > 1.0 && r.is_finite()) {
                return Err(Error::config("solver.rho", format!("must exceed 1, got {r}")));
            }
        }
        if !(self.beta_ls > 0.0 && self.beta_ls < 0.5) {
            return Err(Error::config("solver.beta_ls", "must lie in (0, 0.5)"));
        }
        if !(self.q_ls > 0.0 && self.q_ls < 1.0) {
            return Err(Error::config("solver.q_ls", "must lie in (0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("solver.eps", "must be positive"));
        }
        if !(self.eps_feas > 0.0) {
            return Err(Error::config("solver.eps_feas", "must be positive"));
        }
        if self.max_iter == 0 {
            return Err(Error::config("solver.max_iter", "must be at least 1"));
        }
        Ok(())
    }

    fn rho_for(&self, m: usize) -> f64 {
        self.rho.unwrap_or(1.0 + 1.0 / (m as f64).sqrt())
    }
}

/// One instance of the cone program for target UE `target_ue`.
#[derive(Debug, Clone)]
pub struct SocpProblem {
    pub num_ues: usize,
    pub num_aps: usize,
    pub target_ue: usize,
    pub total_power: f64,
    /// `c[(i * L + l) * L + l'] = kappa_il kappa_il' Xi_{i k, l l'}` with
    /// negative entries clamped to zero.
    pub coef: Vec<f64>,
    /// How many coefficients were clamped.
    pub clamped: usize,
    scale: f64,
    grad: Vec<f64>,
    pairs: Vec<(usize, usize, usize)>,
}

/// Primal-dual iterate `(x, mu, lambda)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Iterate {
    pub x: Vec<f64>,
    pub mu: Vec<f64>,
    pub lambda: Vec<f64>,
}

/// Newton direction.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub dx: Vec<f64>,
    pub dmu: Vec<f64>,
    pub dlambda: Vec<f64>,
}

/// Stacked modified KKT residual.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    pub dual: Vec<f64>,
    pub cent: Vec<f64>,
    pub pri: Vec<f64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl Residual {
    pub fn dual_norm(&self) -> f64 {
        norm(&self.dual)
    }
    pub fn pri_norm(&self) -> f64 {
        norm(&self.pri)
    }
    pub fn cent_norm(&self) -> f64 {
        norm(&self.cent)
    }
    pub fn norm(&self) -> f64 {
        (self.dual_norm().powi(2) + self.cent_norm().powi(2) + self.pri_norm().powi(2)).sqrt()
    }
}

/// Per-iteration trace entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub iter: usize,
    pub t: f64,
    pub gap: f64,
    pub r_dual: f64,
    pub r_pri: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveReport {
    pub converged: bool,
    pub iterations: usize,
    pub r_dual: f64,
    pub r_pri: f64,
    /// Surrogate duality gap at exit, normalized units.
    pub gap: f64,
    /// Barrier parameter at the first iteration.
    pub t0: f64,
    pub clamped_coefficients: usize,
    pub trace: Vec<TraceRow>,
}

#[derive(Debug, Clone)]
pub struct SocpSolution {
    /// Allocation in watts.
    pub allocation: PowerAllocation,
    /// Objective at the allocation, W.
    pub objective: f64,
    pub report: SolveReport,
}

/// Objective coefficients `kappa_il kappa_il' Xi_{ik,ll'}` for target `k`.
pub fn objective_coefficients(k: usize, st: &LargeScaleState) -> Result<Vec<f64>> {
    let (nk, nl) = (st.num_ues, st.num_aps);
    let mut c = vec![0.0; nk * nl * nl];
    for i in 0..nk {
        for l in 0..nl {
            for lp in 0..nl {
                let kk = st.kappa[st.idx(i, l)] * st.kappa[st.idx(i, lp)];
                c[(i * nl + l) * nl + lp] = if kk == 0.0 { 0.0 } else { kk * xi_term(i, k, l, lp, st)? };
            }
        }
    }
    Ok(c)
}

/// Assemble the program for target UE `k` with a network budget `total_power`.
pub fn build_problem(k: usize, st: &LargeScaleState, total_power: f64) -> Result<SocpProblem> {
    if k >= st.num_ues {
        return Err(Error::IndexOutOfRange(format!("UE {k}")));
    }
    let c = objective_coefficients(k, st)?;
    SocpProblem::from_coefficients(st.num_ues, st.num_aps, k, total_power, c)
}

impl SocpProblem {
    /// Program from raw coefficients `c[(i * L + l) * L + l']`; the matrix
    /// for each UE is symmetrized.
    pub fn from_coefficients(
        num_ues: usize,
        num_aps: usize,
        target_ue: usize,
        total_power: f64,
        mut coef: Vec<f64>,
    ) -> Result<Self> {
        if coef.len() != num_ues * num_aps * num_aps || num_ues == 0 || num_aps == 0 {
            return Err(Error::arg("coefficient array must have K*L*L entries"));
        }
        if !(total_power > 0.0 && total_power.is_finite()) {
            return Err(Error::arg("total power must be positive"));
        }
        if coef.iter().any(|c| !c.is_finite()) {
            return Err(Error::Numerical("non-finite objective coefficient".into()));
        }
        let nl = num_aps;
        let mut clamped = 0;
        for i in 0..num_ues {
            for l in 0..nl {
                for lp in l + 1..nl {
                    let (a, b) = ((i * nl + l) * nl + lp, (i * nl + lp) * nl + l);
                    let s = 0.5 * (coef[a] + coef[b]);
                    coef[a] = s;
                    coef[b] = s;
                }
            }
        }
        for c in coef.iter_mut() {
            if *c < 0.0 {
                *c = 0.0;
                clamped += 1;
            }
        }
        let cmax = coef.iter().cloned().fold(0.0, f64::max);
        let scale = if cmax > 0.0 { cmax } else { 1.0 };
        let mut pairs = Vec::new();
        for i in 0..num_ues {
            for a in 0..nl {
                for b in a + 1..nl {
                    if coef[(i * nl + a) * nl + b] > 0.0 {
                        pairs.push((i, a, b));
                    }
                }
            }
        }
        let n = num_ues * nl;
        let mut grad = vec![0.0; 2 * n + pairs.len()];
        for i in 0..num_ues {
            for l in 0..nl {
                grad[i * nl + l] = -coef[(i * nl + l) * nl + l] / scale;
            }
        }
        for (j, &(i, a, b)) in pairs.iter().enumerate() {
            grad[2 * n + j] = -2.0 * coef[(i * nl + a) * nl + b] / scale;
        }
        Ok(SocpProblem { num_ues, num_aps, target_ue, total_power, coef, clamped, scale, grad, pairs })
    }

    /// Number of power coefficients `KL`.
    pub fn num_omega(&self) -> usize {
        self.num_ues * self.num_aps
    }

    pub fn num_cones(&self) -> usize {
        self.pairs.len()
    }

    pub fn num_vars(&self) -> usize {
        2 * self.num_omega() + self.num_cones()
    }

    /// Inequalities handled by the barrier.
    pub fn num_constraints(&self) -> usize {
        self.num_cones() + 2 * self.num_omega() + 1
    }

    pub fn num_equalities(&self) -> usize {
        self.num_omega()
    }

    /// `K L^2 + K L`, the count with every ordered AP pair given its own cone.
    pub fn unreduced_constraint_count(&self) -> usize {
        self.num_ues * self.num_aps * self.num_aps + self.num_omega()
    }

    fn coef3(&self, i: usize, l: usize, lp: usize) -> f64 {
        self.coef[(i * self.num_aps + l) * self.num_aps + lp]
    }

    /// `sum_i sum_{l,l'} c_ill' sqrt(Omega_il Omega_il')` at an allocation in watts.
    pub fn objective(&self, omega: &[f64]) -> f64 {
        let nl = self.num_aps;
        let mut s = 0.0;
        for i in 0..self.num_ues {
            for l in 0..nl {
                for lp in 0..nl {
                    let c = self.coef3(i, l, lp);
                    if c != 0.0 {
                        s += c * (omega[i * nl + l].max(0.0) * omega[i * nl + lp].max(0.0)).sqrt();
                    }
                }
            }
        }
        s
    }

    /// `v^T H v` for the Hessian of [`Self::objective`] at a strictly
    /// positive allocation. Each off-diagonal pair contributes
    /// `-(c/4) sqrt(Omega Omega') (v/Omega - v'/Omega')^2`; diagonal terms are linear.
    pub fn hessian_quadratic_form(&self, omega: &[f64], v: &[f64]) -> Result<f64> {
        let n = self.num_omega();
        if omega.len() != n || v.len() != n {
            return Err(Error::arg("vectors must have K*L entries"));
        }
        if omega.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::arg("Hessian needs strictly positive power coefficients"));
        }
        let nl = self.num_aps;
        let mut s = 0.0;
        for i in 0..self.num_ues {
            for l in 0..nl {
                for lp in 0..nl {
                    if l == lp {
                        continue;
                    }
                    let (a, b) = (i * nl + l, i * nl + lp);
                    let d = v[a] / omega[a] - v[b] / omega[b];
                    s -= 0.25 * self.coef3(i, l, lp) * (omega[a] * omega[b]).sqrt() * d * d;
                }
            }
        }
        Ok(s)
    }

    /// Strictly interior starting point.
    pub fn initial_iterate(&self) -> Iterate {
        let n = self.num_omega();
        let w0 = 0.5 / n as f64;
        let mut x = vec![w0; n];
        x.extend(std::iter::repeat_n(1.0 - w0, n));
        x.extend(std::iter::repeat_n(0.5 * w0, self.num_cones()));
        Iterate { x, mu: vec![1.0; self.num_constraints()], lambda: vec![0.0; n] }
    }

    /// Inequality values `g(x)`, ordered as cones, `-omega`, `-slack`, total.
    pub fn constraints(&self, x: &[f64]) -> Vec<f64> {
        let n = self.num_omega();
        let nl = self.num_aps;
        let mut g = Vec::with_capacity(self.num_constraints());
        for (j, &(i, a, b)) in self.pairs.iter().enumerate() {
            g.push(x[2 * n + j] - (x[i * nl + a] * x[i * nl + b]).sqrt());
        }
        g.extend(x[..2 * n].iter().map(|v| -v));
        g.push(x[..n].iter().sum::<f64>() - 1.0);
        g
    }

    /// Gradient of cone `j` with respect to its two power coefficients.
    fn cone_grad(&self, x: &[f64], j: usize) -> (f64, f64) {
        let (i, a, b) = self.pairs[j];
        let nl = self.num_aps;
        let (va, vb) = (x[i * nl + a], x[i * nl + b]);
        let s = (va * vb).sqrt();
        (-0.5 * s / va, -0.5 * s / vb)
    }

    /// Hessian entries `(aa, bb, ab)` of cone `j`; the auxiliary enters linearly.
    fn cone_hess(&self, x: &[f64], j: usize) -> (f64, f64, f64) {
        let (i, a, b) = self.pairs[j];
        let nl = self.num_aps;
        let (va, vb) = (x[i * nl + a], x[i * nl + b]);
        let s = (va * vb).sqrt();
        (0.25 * s / (va * va), 0.25 * s / (vb * vb), -0.25 / s)
    }

    fn jt_mul(&self, x: &[f64], mu: &[f64]) -> Vec<f64> {
        let n = self.num_omega();
        let nl = self.num_aps;
        let p = self.num_cones();
        let mut out = vec![0.0; self.num_vars()];
        for (j, &(i, a, b)) in self.pairs.iter().enumerate() {
            let (ga, gb) = self.cone_grad(x, j);
            out[i * nl + a] += mu[j] * ga;
            out[i * nl + b] += mu[j] * gb;
            out[2 * n + j] += mu[j];
        }
        for v in 0..2 * n {
            out[v] -= mu[p + v];
        }
        let s = mu[p + 2 * n];
        for v in out[..n].iter_mut() {
            *v += s;
        }
        out
    }

    fn j_mul(&self, x: &[f64], dx: &[f64]) -> Vec<f64> {
        let n = self.num_omega();
        let nl = self.num_aps;
        let mut out = Vec::with_capacity(self.num_constraints());
        for (j, &(i, a, b)) in self.pairs.iter().enumerate() {
            let (ga, gb) = self.cone_grad(x, j);
            out.push(ga * dx[i * nl + a] + gb * dx[i * nl + b] + dx[2 * n + j]);
        }
        out.extend(dx[..2 * n].iter().map(|v| -v));
        out.push(dx[..n].iter().sum());
        out
    }

    /// Modified KKT residual at barrier parameter `t`. Fails outside the
    /// strict interior.
    pub fn kkt_residual(&self, y: &Iterate, t: f64) -> Result<Residual> {
        let g = self.constraints(&y.x);
        if g.iter().any(|&v| !(v < 0.0)) || y.mu.iter().any(|&m| !(m > 0.0)) {
            return Err(Error::Numerical("iterate is not strictly interior".into()));
        }
        Ok(self.residual_with(y, &g, t))
    }

    fn residual_with(&self, y: &Iterate, g: &[f64], t: f64) -> Residual {
        let n = self.num_omega();
        let mut dual = self.jt_mul(&y.x, &y.mu);
        for (d, gr) in dual.iter_mut().zip(&self.grad) {
            *d += gr;
        }
        for v in 0..n {
            dual[v] += y.lambda[v];
            dual[n + v] += y.lambda[v];
        }
        let cent = y.mu.iter().zip(g).map(|(m, g)| -m * g - 1.0 / t).collect();
        let pri = (0..n).map(|v| y.x[v] + y.x[n + v] - 1.0).collect();
        Residual { dual, cent, pri }
    }

    /// Dense KKT matrix and its right-hand side.
    pub fn kkt_system(&self, y: &Iterate, t: f64) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let r = self.kkt_residual(y, t)?;
        let g = self.constraints(&y.x);
        let (n, nx, m, p) = (self.num_omega(), self.num_vars(), self.num_constraints(), self.num_equalities());
        let nl = self.num_aps;
        let dim = nx + m + p;
        let mut k = DMatrix::<f64>::zeros(dim, dim);
        // Jacobian of g.
        let mut jac = DMatrix::<f64>::zeros(m, nx);
        for (j, &(i, a, b)) in self.pairs.iter().enumerate() {
            let (ia, ib) = (i * nl + a, i * nl + b);
            let (ga, gb) = self.cone_grad(&y.x, j);
            let (haa, hbb, hab) = self.cone_hess(&y.x, j);
            jac[(j, ia)] = ga;
            jac[(j, ib)] = gb;
            jac[(j, 2 * n + j)] = 1.0;
            k[(ia, ia)] += y.mu[j] * haa;
            k[(ib, ib)] += y.mu[j] * hbb;
            k[(ia, ib)] += y.mu[j] * hab;
            k[(ib, ia)] += y.mu[j] * hab;
        }
        let pc = self.num_cones();
        for v in 0..2 * n {
            jac[(pc + v, v)] = -1.0;
        }
        for v in 0..n {
            jac[(m - 1, v)] = 1.0;
        }
        for r_ in 0..m {
            for c in 0..nx {
                let v = jac[(r_, c)];
                if v != 0.0 {
                    k[(c, nx + r_)] = v;
                    k[(nx + r_, c)] = -y.mu[r_] * v;
                }
            }
            k[(nx + r_, nx + r_)] = -g[r_];
        }
        for e in 0..p {
            for c in [e, n + e] {
                k[(c, nx + m + e)] = 1.0;
                k[(nx + m + e, c)] = 1.0;
            }
        }
        let rhs = DVector::from_iterator(
            dim,
            r.dual.iter().chain(&r.cent).chain(&r.pri).map(|v| -v),
        );
        Ok((k, rhs))
    }

    fn split_step(&self, v: &DVector<f64>) -> Step {
        let (nx, m) = (self.num_vars(), self.num_constraints());
        Step {
            dx: v.rows(0, nx).iter().cloned().collect(),
            dmu: v.rows(nx, m).iter().cloned().collect(),
            dlambda: v.rows(nx + m, self.num_equalities()).iter().cloned().collect(),
        }
    }

    /// Newton direction for the modified KKT system.
    pub fn newton_step(&self, y: &Iterate, t: f64, method: NewtonMethod) -> Result<Step> {
        match method {
            NewtonMethod::Structured => self.structured_step(y, t),
            NewtonMethod::Dense | NewtonMethod::Refined => {
                let (k, rhs) = self.kkt_system(y, t)?;
                let sol = dense_solve(&k, &rhs, method == NewtonMethod::Refined)?;
                Ok(self.split_step(&sol))
            }
        }
    }

    fn structured_step(&self, y: &Iterate, t: f64) -> Result<Step> {
        let g = self.constraints(&y.x);
        if g.iter().any(|&v| !(v < 0.0)) || y.mu.iter().any(|&m| !(m > 0.0)) {
            return Err(Error::Numerical("iterate is not strictly interior".into()));
        }
        let r = self.residual_with(y, &g, t);
        let Some(mut step) = self.structured_solve(y, &g, &r) else {
            return self.newton_step(y, t, NewtonMethod::Dense);
        };
        // The elimination divides by near-zero constraint values late in the
        // run; refining against the unreduced system restores the accuracy.
        let tol = 1e-12 * r.norm();
        let mut defect = self.kkt_apply(y, &g, &step, &r);
        for _ in 0..5 {
            if defect.norm() <= tol {
                break;
            }
            let Some(c) = self.structured_solve(y, &g, &defect) else { break };
            let mut next = step.clone();
            for (a, b) in next.dx.iter_mut().zip(&c.dx) {
                *a += b;
            }
            for (a, b) in next.dmu.iter_mut().zip(&c.dmu) {
                *a += b;
            }
            for (a, b) in next.dlambda.iter_mut().zip(&c.dlambda) {
                *a += b;
            }
            let d = self.kkt_apply(y, &g, &next, &r);
            if d.norm() >= defect.norm() {
                break;
            }
            step = next;
            defect = d;
        }
        if defect.norm() > 1e-6 * r.norm() {
            return self.newton_step(y, t, NewtonMethod::Dense);
        }
        Ok(step)
    }

    /// `K s + r` for the unreduced KKT matrix `K`, i.e. the defect of `s`
    /// as a solution of `K s = -r`.
    fn kkt_apply(&self, y: &Iterate, g: &[f64], s: &Step, r: &Residual) -> Residual {
        let (n, nl) = (self.num_omega(), self.num_aps);
        let mut dual = self.jt_mul(&y.x, &s.dmu);
        for (j, &(i, a, b)) in self.pairs.iter().enumerate() {
            let (ia, ib) = (i * nl + a, i * nl + b);
            let (haa, hbb, hab) = self.cone_hess(&y.x, j);
            dual[ia] += y.mu[j] * (haa * s.dx[ia] + hab * s.dx[ib]);
            dual[ib] += y.mu[j] * (hab * s.dx[ia] + hbb * s.dx[ib]);
        }
        for v in 0..n {
            dual[v] += s.dlambda[v];
            dual[n + v] += s.dlambda[v];
        }
        for (d, rd) in dual.iter_mut().zip(&r.dual) {
            *d += rd;
        }
        let jdx = self.j_mul(&y.x, &s.dx);
        let cent = (0..g.len()).map(|j| -y.mu[j] * jdx[j] - g[j] * s.dmu[j] + r.cent[j]).collect();
        let pri = (0..n).map(|v| s.dx[v] + s.dx[n + v] + r.pri[v]).collect();
        Residual { dual, cent, pri }
    }

    /// Block elimination for `K s = -r`: the multipliers, the slacks and
    /// the auxiliaries are eliminated, leaving one `L x L` block per UE
    /// bordered by the total-power multiplier.
    fn structured_solve(&self, y: &Iterate, g: &[f64], r: &Residual) -> Option<Step> {
        let (n, nl, pc) = (self.num_omega(), self.num_aps, self.num_cones());
        let x = &y.x;
        let d: Vec<f64> = y.mu.iter().zip(g).map(|(m, g)| m / -g).collect();
        // Cone terms of `w` cancel between the power rows and the auxiliary
        // rows, so they are left out rather than formed and subtracted. The
        // total-power multiplier stays in the system as a border.
        let tot = pc + 2 * n;
        let w: Vec<f64> = (0..g.len()).map(|j| if j < pc || j == tot { 0.0 } else { r.cent[j] / g[j] }).collect();
        let jw = self.jt_mul(x, &w);
        let r1: Vec<f64> = r.dual.iter().zip(&jw).map(|(a, b)| -a - b).collect();

        let d_w = &d[pc..pc + n];
        let d_s = &d[pc + n..pc + 2 * n];

        let mut blocks = vec![DMatrix::<f64>::zeros(nl, nl); self.num_ues];
        let mut rhs: Vec<f64> = (0..n).map(|v| r1[v] - r1[n + v] - d_s[v] * r.pri[v]).collect();
        for v in 0..n {
            blocks[v / nl][(v % nl, v % nl)] += d_w[v] + d_s[v];
        }
        // The auxiliary row reads D_j (J_j dx) = r1_u, so eliminating it
        // cancels the D_j J_j^T J_j term and leaves the cone curvature.
        let mut cone_cols = Vec::with_capacity(pc);
        for (j, &(i, a, b)) in self.pairs.iter().enumerate() {
            let (ia, ib) = (i * nl + a, i * nl + b);
            let (ga, gb) = self.cone_grad(x, j);
            let (haa, hbb, hab) = self.cone_hess(x, j);
            let blk = &mut blocks[i];
            blk[(a, a)] += y.mu[j] * haa;
            blk[(b, b)] += y.mu[j] * hbb;
            blk[(a, b)] += y.mu[j] * hab;
            blk[(b, a)] += y.mu[j] * hab;
            let ru = r1[2 * n + j];
            rhs[ia] -= ga * ru;
            rhs[ib] -= gb * ru;
            cone_cols.push((ga, gb));
        }

        let mut y_sol = vec![0.0; n];
        let mut z_sol = vec![0.0; n];
        for (i, blk) in blocks.into_iter().enumerate() {
            let lu = blk.lu();
            let rb = DVector::from_column_slice(&rhs[i * nl..(i + 1) * nl]);
            let ones = DVector::from_element(nl, 1.0);
            let (Some(ys), Some(zs)) = (lu.solve(&rb), lu.solve(&ones)) else {
                return None;
            };
            y_sol[i * nl..(i + 1) * nl].copy_from_slice(ys.as_slice());
            z_sol[i * nl..(i + 1) * nl].copy_from_slice(zs.as_slice());
        }
        let sy: f64 = y_sol.iter().sum();
        let sz: f64 = z_sol.iter().sum();
        let denom = y.mu[tot] * sz - g[tot];
        if !(denom > 0.0) {
            return None;
        }
        let f = (y.mu[tot] * sy - r.cent[tot]) / denom;

        let mut dx = vec![0.0; self.num_vars()];
        for v in 0..n {
            dx[v] = y_sol[v] - z_sol[v] * f;
            dx[n + v] = -r.pri[v] - dx[v];
        }
        for (j, &(i, a, b)) in self.pairs.iter().enumerate() {
            let (ga, gb) = cone_cols[j];
            let iu = 2 * n + j;
            dx[iu] = (r.dual[iu] * g[j] + r.cent[j]) / y.mu[j] - ga * dx[i * nl + a] - gb * dx[i * nl + b];
        }
        let dlambda: Vec<f64> = (0..n).map(|v| r1[n + v] - d_s[v] * dx[n + v]).collect();
        let jdx = self.j_mul(x, &dx);
        let dmu: Vec<f64> = (0..g.len())
            .map(|j| match j {
                _ if j < pc => -r.dual[2 * n + j],
                _ if j == tot => f,
                _ => (r.cent[j] - y.mu[j] * jdx[j]) / g[j],
            })
            .collect();
        if dx.iter().chain(&dmu).chain(&dlambda).any(|v| !v.is_finite()) {
            return None;
        }
        Some(Step { dx, dmu, dlambda })
    }

    fn advance(&self, y: &Iterate, s: &Step, alpha: f64) -> Iterate {
        let add = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u + alpha * v).collect();
        Iterate { x: add(&y.x, &s.dx), mu: add(&y.mu, &s.dmu), lambda: add(&y.lambda, &s.dlambda) }
    }

    /// Backtracking search: start at `0.99 alpha_max` and shrink by `q_ls`
    /// until the trial point is strictly feasible and the residual norm has
    /// dropped by the factor `1 - alpha beta_ls`.
    pub fn line_search(&self, y: &Iterate, s: &Step, t: f64, opts: &SolverOptions) -> Result<f64> {
        let r0 = self.kkt_residual(y, t)?.norm();
        let mut alpha = 0.99 * max_step(&y.mu, &s.dmu);
        loop {
            if alpha < 1e-16 {
                return Err(Error::NotConverged("line search step underflow".into()));
            }
            let trial = self.advance(y, s, alpha);
            let g = self.constraints(&trial.x);
            if g.iter().all(|&v| v < 0.0) && trial.mu.iter().all(|&m| m > 0.0) {
                let r = self.residual_with(&trial, &g, t).norm();
                if r <= (1.0 - alpha * opts.beta_ls) * r0 {
                    return Ok(alpha);
                }
            }
            alpha *= opts.q_ls;
        }
    }

    /// Run the interior-point iteration.
    pub fn solve(&self, opts: &SolverOptions) -> Result<SocpSolution> {
        opts.validate()?;
        let m = self.num_constraints();
        let rho = opts.rho_for(m);
        let mut y = self.initial_iterate();
        let mut trace = Vec::new();
        let mut converged = false;
        let mut t0 = f64::NAN;
        let mut last = (f64::NAN, f64::NAN, f64::NAN);
        let mut iterations = 0;
        for iter in 0..=opts.max_iter {
            let g = self.constraints(&y.x);
            let gap = surrogate_gap(&g, &y.mu);
            let t = rho * m as f64 / gap;
            if iter == 0 {
                t0 = t;
            }
            let r = self.residual_with(&y, &g, t);
            last = (r.dual_norm(), r.pri_norm(), gap);
            if last.0 <= opts.eps_feas && last.1 <= opts.eps_feas && gap <= opts.eps {
                converged = true;
                break;
            }
            if iter == opts.max_iter {
                break;
            }
            let step = self.newton_step(&y, t, opts.newton)?;
            let alpha = match self.line_search(&y, &step, t, opts) {
                Ok(a) => a,
                Err(Error::NotConverged(_)) => break,
                Err(e) => return Err(e),
            };
            trace.push(TraceRow { iter, t, gap, r_dual: last.0, r_pri: last.1, alpha });
            y = self.advance(&y, &step, alpha);
            iterations = iter + 1;
        }
        let n = self.num_omega();
        let omega: Vec<f64> = y.x[..n].iter().map(|w| w.max(0.0) * self.total_power).collect();
        let objective = self.objective(&omega);
        let allocation = PowerAllocation::from_vec(self.num_ues, self.num_aps, omega)?;
        Ok(SocpSolution {
            allocation,
            objective,
            report: SolveReport {
                converged,
                iterations,
                r_dual: last.0,
                r_pri: last.1,
                gap: last.2,
                t0,
                clamped_coefficients: self.clamped,
                trace,
            },
        })
    }

    /// Objective scale separating normalized and physical units.
    pub fn objective_scale(&self) -> f64 {
        self.scale * self.total_power
    }
}

fn dense_solve(k: &DMatrix<f64>, rhs: &DVector<f64>, refine: bool) -> Result<DVector<f64>> {
    let solve_once = |mat: &DMatrix<f64>| {
        let lu = mat.clone().lu();
        lu.solve(rhs).map(|s| (lu, s))
    };
    let (lu, mut sol) = match solve_once(k) {
        Some(v) => v,
        None => {
            let reg = k + DMatrix::<f64>::identity(k.nrows(), k.ncols()) * 1e-12;
            solve_once(&reg).ok_or_else(|| Error::Numerical("singular KKT matrix".into()))?
        }
    };
    if refine {
        for _ in 0..2 {
            let res = rhs - k * &sol;
            if let Some(c) = lu.solve(&res) {
                sol += c;
            }
        }
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite Newton step".into()));
    }
    Ok(sol)
}

/// Largest step keeping `mu + alpha dmu >= 0`, capped at one.
pub fn max_step(mu: &[f64], dmu: &[f64]) -> f64 {
    mu.iter()
        .zip(dmu)
        .filter(|(_, d)| **d < 0.0)
        .map(|(m, d)| -m / d)
        .fold(1.0, f64::min)
}

/// `-g^T mu`.
pub fn surrogate_gap(g: &[f64], mu: &[f64]) -> f64 {
    -g.iter().zip(mu).map(|(a, b)| a * b).sum::<f64>()
}

fn check_bound_args(m: usize, t0: f64, eps: f64, alpha: f64, beta: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(Error::arg("alpha must lie in (0, 0.5)"));
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::arg("beta must lie in (0, 1)"));
    }
    if m == 0 || !(t0 > 0.0) || !(eps > 0.0 && eps < 0.5) {
        return Err(Error::arg("bound needs m >= 1, t0 > 0 and eps in (0, 0.5)"));
    }
    Ok(alpha * beta * (1.0 - 2.0 * alpha).powi(2) / (20.0 - 8.0 * alpha))
}

/// Newton-step bound for general `rho > 1`:
/// `ceil(log(m / (t0 eps)) / log rho) * (m (rho - 1 - log rho) / gamma + c)`.
pub fn newton_step_bound_general(m: usize, t0: f64, eps: f64, rho: f64, alpha: f64, beta: f64) -> Result<f64> {
    let gamma = check_bound_args(m, t0, eps, alpha, beta)?;
    if !(rho > 1.0) {
        return Err(Error::arg("rho must exceed 1"));
    }
    let mf = m as f64;
    let c = (1.0 / eps).log2().log2();
    let outer = ((mf / (t0 * eps)).ln() / rho.ln()).ceil().max(0.0);
    Ok(outer * (mf * (rho - 1.0 - rho.ln()) / gamma + c))
}

/// Newton-step bound with `rho = 1 + 1/sqrt(m)`:
/// `ceil(sqrt(m) log2(m / (t0 eps))) * (1 / (2 gamma) + c)`.
pub fn newton_step_bound(m: usize, t0: f64, eps: f64, alpha: f64, beta: f64) -> Result<f64> {
    let gamma = check_bound_args(m, t0, eps, alpha, beta)?;
    let mf = m as f64;
    let c = (1.0 / eps).log2().log2();
    let outer = (mf.sqrt() * (mf / (t0 * eps)).log2()).ceil().max(0.0);
    Ok(outer * (0.5 / gamma + c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single_ue(c11: f64, c22: f64, c12: f64) -> SocpProblem {
        SocpProblem::from_coefficients(1, 2, 0, 10.0, vec![c11, c12, c12, c22]).unwrap()
    }

    fn random_problem(k: usize, l: usize, seed: u64) -> SocpProblem {
        use rand::Rng;
        let mut rng = crate::rng::stream(seed, 7);
        let mut c = vec![0.0; k * l * l];
        for i in 0..k {
            let a: Vec<f64> = (0..l).map(|_| rng.random_range(0.1..1.0)).collect();
            for p in 0..l {
                for q in 0..l {
                    c[(i * l + p) * l + q] = a[p] * a[q] * (i + 1) as f64 * 1e-3;
                }
                c[(i * l + p) * l + p] += rng.random_range(0.0..1e-4);
            }
        }
        SocpProblem::from_coefficients(k, l, 0, 10.0, c).unwrap()
    }

    #[test]
    fn variable_counts() {
        let p = single_ue(1.0, 1.0, 0.5);
        assert_eq!(p.num_omega(), 2);
        assert_eq!(p.num_cones(), 1);
        assert_eq!(p.num_vars(), 5);
        assert_eq!(p.num_constraints(), 1 + 4 + 1);
        assert_eq!(p.unreduced_constraint_count(), 6);
        let q = random_problem(3, 4, 1);
        assert_eq!(q.num_cones(), 18);
        assert_eq!(q.unreduced_constraint_count(), 3 * 16 + 12);
    }

    #[test]
    fn initial_point_is_interior() {
        let p = random_problem(2, 3, 2);
        let y = p.initial_iterate();
        assert!(p.constraints(&y.x).iter().all(|&g| g < 0.0));
        let r = p.kkt_residual(&y, 1.0).unwrap();
        assert!(r.pri_norm() < 1e-15);
    }

    #[test]
    fn central_point_has_zero_centrality_residual() {
        let p = random_problem(2, 2, 3);
        let mut y = p.initial_iterate();
        let t = 7.5;
        let g = p.constraints(&y.x);
        y.mu = g.iter().map(|g| -1.0 / (t * g)).collect();
        let r = p.kkt_residual(&y, t).unwrap();
        assert!(r.cent_norm() < 1e-12);
    }

    #[test]
    fn exterior_point_rejected() {
        let p = single_ue(1.0, 1.0, 0.5);
        let mut y = p.initial_iterate();
        y.x[0] = -0.1;
        assert!(p.kkt_residual(&y, 1.0).is_err());
    }

    #[test]
    fn dual_residual_gradient_matches_finite_differences() {
        // With mu = 0 and lambda = 0 the dual residual is the objective gradient.
        let p = random_problem(2, 3, 4);
        let mut y = p.initial_iterate();
        y.mu.iter_mut().for_each(|m| *m = 1e-300);
        let r = p.kkt_residual(&y, 1.0).unwrap();
        let f = |x: &[f64]| {
            let n = p.num_omega();
            let mut s = 0.0;
            for i in 0..p.num_ues {
                for l in 0..p.num_aps {
                    s += p.coef3(i, l, l) * x[i * p.num_aps + l];
                }
            }
            for (j, &(i, a, b)) in p.pairs.iter().enumerate() {
                s += 2.0 * p.coef3(i, a, b) * x[2 * n + j];
            }
            -s / p.scale
        };
        for v in 0..p.num_vars() {
            let h = 1e-6;
            let mut xp = y.x.clone();
            let mut xm = y.x.clone();
            xp[v] += h;
            xm[v] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((fd - r.dual[v]).abs() <= 1e-6 * fd.abs().max(1e-12), "var {v}");
        }
    }

    #[test]
    fn newton_solvers_agree() {
        for (k, l, seed) in [(1, 2, 5), (2, 3, 6), (3, 4, 7)] {
            let p = random_problem(k, l, seed);
            let mut y = p.initial_iterate();
            y.mu.iter_mut().enumerate().for_each(|(j, m)| *m = 0.5 + 0.1 * j as f64);
            y.lambda.iter_mut().for_each(|v| *v = 0.3);
            let t = 3.0;
            let a = p.newton_step(&y, t, NewtonMethod::Dense).unwrap();
            let b = p.newton_step(&y, t, NewtonMethod::Structured).unwrap();
            let c = p.newton_step(&y, t, NewtonMethod::Refined).unwrap();
            let flat = |s: &Step| s.dx.iter().chain(&s.dmu).chain(&s.dlambda).cloned().collect::<Vec<_>>();
            let (fa, fb, fc) = (flat(&a), flat(&b), flat(&c));
            let scale = norm(&fa);
            let diff_b = norm(&fa.iter().zip(&fb).map(|(u, v)| u - v).collect::<Vec<_>>());
            let diff_c = norm(&fa.iter().zip(&fc).map(|(u, v)| u - v).collect::<Vec<_>>());
            assert!(diff_b <= 1e-8 * scale, "structured vs dense {diff_b} / {scale}");
            assert!(diff_c <= 1e-8 * scale, "refined vs dense {diff_c}");

            let (kk, rhs) = p.kkt_system(&y, t).unwrap();
            let sol = DVector::from_vec(fb.clone());
            let res = (&kk * sol - &rhs).norm();
            assert!(res <= 1e-10 * rhs.norm(), "linear residual {res}");
        }
    }

    #[test]
    fn step_length_rules() {
        assert_eq!(max_step(&[1.0, 2.0], &[-2.0, 1.0]), 0.5);
        assert_eq!(max_step(&[1.0, 2.0], &[2.0, 1.0]), 1.0);
        assert_eq!(surrogate_gap(&[-1.0, -2.0], &[1.0, 1.0]), 3.0);
    }

    #[test]
    fn single_ue_closed_form() {
        // max c11 w1 + c22 w2 + 2 c12 sqrt(w1 w2) over w1 + w2 <= 1 with
        // rank-one c = a a^T puts w_l proportional to a_l^2.
        let (a1, a2) = (0.3f64, 0.8f64);
        let p = single_ue(a1 * a1, a2 * a2, a1 * a2);
        let sol = p.solve(&SolverOptions::default()).unwrap();
        assert!(sol.report.converged, "{:?}", sol.report);
        let want = [a1 * a1 / (a1 * a1 + a2 * a2), a2 * a2 / (a1 * a1 + a2 * a2)];
        for (w, target) in sol.allocation.omega.iter().zip(want) {
            assert!((w / 10.0 - target).abs() < 1e-6);
        }
        assert!((sol.objective - 10.0 * (a1 * a1 + a2 * a2)).abs() < 1e-7);
        assert!(sol.report.r_dual <= 1e-9 && sol.report.r_pri <= 1e-9);
    }

    #[test]
    fn single_ap_puts_everything_on_best_coefficient() {
        let c = vec![0.2, 0.9, 0.4];
        let p = SocpProblem::from_coefficients(3, 1, 0, 5.0, c).unwrap();
        let sol = p.solve(&SolverOptions::default()).unwrap();
        assert!(sol.report.converged);
        assert!((sol.allocation.get(1, 0) - 5.0).abs() < 1e-6);
        assert!(sol.allocation.total() <= 5.0 + 1e-9);
    }

    #[test]
    fn all_zero_objective_is_feasible() {
        let p = SocpProblem::from_coefficients(2, 2, 0, 1.0, vec![0.0; 8]).unwrap();
        let sol = p.solve(&SolverOptions::default()).unwrap();
        assert!(sol.report.converged);
        assert_eq!(sol.objective, 0.0);
        assert!(sol.allocation.total() <= 1.0 + 1e-9);
    }

    #[test]
    fn negative_coefficients_are_clamped() {
        let p = SocpProblem::from_coefficients(1, 2, 0, 1.0, vec![1.0, -0.2, -0.2, 1.0]).unwrap();
        assert_eq!(p.clamped, 2);
        assert!(p.coef.iter().all(|&c| c >= 0.0));
    }

    #[test]
    fn solvers_reach_the_same_optimum() {
        let p = random_problem(2, 3, 9);
        let a = p.solve(&SolverOptions::default()).unwrap();
        let dense = SolverOptions { newton: NewtonMethod::Dense, ..Default::default() };
        let b = p.solve(&dense).unwrap();
        let tail = |s: &SocpSolution| format!("{} {} {:.2e} {:.2e} {:.2e} {:?}", s.report.converged, s.report.iterations, s.report.r_dual, s.report.r_pri, s.report.gap, s.report.trace.last());
        assert!(a.report.converged && b.report.converged, "{} | {}", tail(&a), tail(&b));
        assert!((a.objective - b.objective).abs() <= 1e-9 * a.objective);
    }

    #[test]
    fn trace_descends() {
        let p = random_problem(2, 2, 10);
        let opts = SolverOptions::default();
        let sol = p.solve(&opts).unwrap();
        let tr = &sol.report.trace;
        assert!(!tr.is_empty());
        assert!(tr.iter().all(|r| r.gap > 0.0 && r.alpha > 0.0 && r.alpha <= 0.99));
        assert_eq!(tr.len(), sol.report.iterations);
    }

    #[test]
    fn iteration_cap_reports_non_convergence() {
        let p = random_problem(2, 3, 11);
        let opts = SolverOptions { max_iter: 3, ..Default::default() };
        let sol = p.solve(&opts).unwrap();
        assert!(!sol.report.converged);
        assert_eq!(sol.report.iterations, 3);
    }

    #[test]
    fn option_validation() {
        assert!(SolverOptions::default().validate().is_ok());
        let bad = SolverOptions { rho: Some(1.0), ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config { ref field, .. }) if field == "solver.rho"));
        let bad = SolverOptions { beta_ls: 0.5, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn hessian_vanishes_along_proportional_directions() {
        let p = random_problem(2, 3, 12);
        let omega = vec![0.5, 1.0, 2.0, 0.2, 0.3, 0.7];
        let v: Vec<f64> = omega.iter().map(|w| 0.37 * w).collect();
        assert!(p.hessian_quadratic_form(&omega, &v).unwrap().abs() < 1e-18);
        let q = SocpProblem::from_coefficients(1, 1, 0, 1.0, vec![2.0]).unwrap();
        assert!(q.hessian_quadratic_form(&[0.4], &[1.0]).unwrap() <= 0.0);
        assert!(p.hessian_quadratic_form(&[0.0; 6], &[1.0; 6]).is_err());
    }

    #[test]
    fn hessian_matches_finite_differences() {
        let p = random_problem(2, 3, 13);
        let omega = vec![0.5, 1.0, 2.0, 0.2, 0.3, 0.7];
        let v = vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.25];
        let h = 1e-4;
        let at = |s: f64| {
            let w: Vec<f64> = omega.iter().zip(&v).map(|(a, b)| a + s * b).collect();
            p.objective(&w)
        };
        let fd = (at(h) - 2.0 * at(0.0) + at(-h)) / (h * h);
        let exact = p.hessian_quadratic_form(&omega, &v).unwrap();
        assert!((fd - exact).abs() <= 1e-5 * exact.abs(), "{fd} vs {exact}");
    }

    #[test]
    fn bound_behaviour() {
        let b = newton_step_bound(100, 1.0, 1e-8, 0.01, 0.5).unwrap();
        assert!(b.is_finite() && b > 0.0);
        assert!(newton_step_bound(100, 1.0, 1e-8, 0.5, 0.5).is_err());
        assert!(newton_step_bound_general(100, 1.0, 1e-8, 1.0, 0.01, 0.5).is_err());
        let mut prev = 0.0;
        for m in [10usize, 30, 100, 300, 1000, 3000, 10000] {
            let q = newton_step_bound(m, 1.0, 1e-8, 0.01, 0.5).unwrap();
            assert!(q >= prev);
            prev = q;
        }
    }

    #[test]
    fn short_step_bound_dominates_general_form() {
        for m in [10usize, 50, 200, 1000, 10000] {
            let rho = 1.0 + 1.0 / (m as f64).sqrt();
            let general = newton_step_bound_general(m, 2.0, 1e-8, rho, 0.01, 0.5).unwrap();
            let short = newton_step_bound(m, 2.0, 1e-8, 0.01, 0.5).unwrap();
            assert!(short >= general, "m={m}");
            // The two differ asymptotically by the base of the logarithm.
            assert!(short / general < std::f64::consts::LOG2_E * 1.2);
        }
    }

    proptest! {
        #[test]
        fn hessian_is_negative_semidefinite(
            seed in 0u64..1000,
            omega in proptest::collection::vec(1e-3..10.0f64, 6),
            v in proptest::collection::vec(-1.0..1.0f64, 6),
        ) {
            let p = random_problem(2, 3, seed);
            let q = p.hessian_quadratic_form(&omega, &v).unwrap();
            let vv: f64 = v.iter().map(|x| x * x).sum();
            prop_assert!(q <= 1e-12 * vv);
        }

        #[test]
        fn smaller_tolerance_never_lowers_bound(m in 2usize..5000, e in 1e-12..1e-3f64) {
            let a = newton_step_bound(m, 1.0, e, 0.01, 0.5).unwrap();
            let b = newton_step_bound(m, 1.0, e * 0.1, 0.01, 0.5).unwrap();
            prop_assert!(b >= a);
        }
    }
}
