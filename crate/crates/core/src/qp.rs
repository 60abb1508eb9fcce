//! Dense-interface convex QP solver.
//!
//! Solves
//!
//! ```text
//! minimize    ½ zᵀ H z + gᵀ z + offset
//! subject to  lb ≤ C z ≤ ub
//! ```
//!
//! with an operator-splitting (ADMM) iteration in the style of OSQP: Ruiz
//! equilibration, over-relaxation, adaptive step size, and an active-set
//! polish that solves the equality-constrained KKT system on the detected
//! active set. Infeasibility is reported through the usual divergence
//! certificates of the splitting iteration.
//!
//! The linear systems are factored with an envelope Cholesky, so problems
//! whose variables are ordered stage by stage (as the OCP builders do) cost
//! roughly linear time per iteration.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::{envelope_of, inf_norm_vec, CsrMatrix, EnvelopeCholesky};
use crate::lp::{solve_lp, LpOutcome};
use crate::scalar::Real;


const POLISH_ACTIVE_SET_ROUNDS: usize = 8;
#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("invalid QP: {0}")]
    InvalidProblem(String),
}

/// Convex QP in the `lb ≤ C z ≤ ub` form. Equalities use `lb == ub`;
/// one-sided rows use infinite bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem<T: Real = f64> {
    pub hc: DMatrix<T>,
    pub g: DVector<T>,
    pub c: DMatrix<T>,
    pub lb: DVector<T>,
    pub ub: DVector<T>,
    /// Constant added to the objective value.
    pub offset: T,
}

impl<T: Real> QpProblem<T> {
    pub fn new(
        hc: DMatrix<T>,
        g: DVector<T>,
        c: DMatrix<T>,
        lb: DVector<T>,
        ub: DVector<T>,
    ) -> Result<Self, QpError> {
        let p = Self { hc, g, c, lb, ub, offset: T::zero() };
        p.validate()?;
        Ok(p)
    }

    /// Linear program `min gᵀz s.t. lb ≤ Cz ≤ ub`.
    pub fn linear(
        g: DVector<T>,
        c: DMatrix<T>,
        lb: DVector<T>,
        ub: DVector<T>,
    ) -> Result<Self, QpError> {
        let n = g.len();
        Self::new(DMatrix::zeros(n, n), g, c, lb, ub)
    }

    pub fn num_vars(&self) -> usize {
        self.g.len()
    }

    pub fn num_rows(&self) -> usize {
        self.lb.len()
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.g.len();
        if self.hc.shape() != (n, n) {
            return Err(QpError::InvalidProblem(format!(
                "cost matrix is {:?}, expected {n}x{n}",
                self.hc.shape()
            )));
        }
        let q = self.lb.len();
        if self.ub.len() != q || self.c.shape() != (q, n) {
            return Err(QpError::InvalidProblem(format!(
                "constraint matrix {:?} does not match bounds ({q}) and {n} variables",
                self.c.shape()
            )));
        }
        let tol = T::lit(1e-12);
        for i in 0..n {
            for j in 0..i {
                let (a, b) = (self.hc[(i, j)], self.hc[(j, i)]);
                if (a - b).abs() > tol * T::one().max(a.abs()) {
                    return Err(QpError::InvalidProblem(format!("cost matrix not symmetric at ({i},{j})")));
                }
            }
        }
        for i in 0..q {
            if self.lb[i] > self.ub[i] {
                return Err(QpError::InvalidProblem(format!("row {i}: lower bound above upper bound")));
            }
        }
        if self.hc.iter().chain(self.g.iter()).chain(self.c.iter()).any(|v| !v.finite()) {
            return Err(QpError::InvalidProblem("non-finite problem data".into()));
        }
        Ok(())
    }

    pub fn objective(&self, z: &DVector<T>) -> T {
        let hz = &self.hc * z;
        T::lit(0.5) * z.dot(&hz) + self.g.dot(z) + self.offset
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Solved,
    PrimalInfeasible,
    DualInfeasible,
    MaxIter,
}

#[derive(Debug, Clone)]
pub struct QpSolution<T: Real = f64> {
    pub z: DVector<T>,
    pub y: DVector<T>,
    pub obj: T,
    pub status: QpStatus,
    pub iters: usize,
    pub primal_res: T,
    pub dual_res: T,
    pub polished: bool,
    /// Infeasibility certificate (`y` direction for primal, `z` direction
    /// for dual infeasibility).
    pub certificate: Option<DVector<T>>,
}

#[derive(Debug, Clone, Copy)]
pub struct QpSettings<T: Real = f64> {
    pub eps_abs: T,
    pub eps_rel: T,
    pub max_iter: usize,
    pub rho: T,
    pub sigma: T,
    pub alpha: T,
    pub adaptive_rho: bool,
    pub check_interval: usize,
    pub scaling_iters: usize,
    pub polish: bool,
    pub polish_delta: T,
    pub polish_refine_iters: usize,
    pub eps_prim_inf: T,
    pub eps_dual_inf: T,
}

impl<T: Real> Default for QpSettings<T> {
    fn default() -> Self {
        Self {
            eps_abs: T::lit(1e-8),
            eps_rel: T::lit(1e-8),
            max_iter: 20_000,
            rho: T::lit(0.1),
            sigma: T::lit(1e-6),
            alpha: T::lit(1.6),
            adaptive_rho: true,
            check_interval: 10,
            scaling_iters: 10,
            polish: true,
            polish_delta: T::lit(1e-7),
            polish_refine_iters: 12,
            eps_prim_inf: T::lit(1e-6),
            eps_dual_inf: T::lit(1e-6),
        }
    }
}

impl QpSettings<f32> {
    /// Tolerances that single precision can actually reach.
    pub fn single_precision() -> Self {
        Self { eps_abs: 1e-4, eps_rel: 1e-4, polish_delta: 1e-4, ..Self::default() }
    }
}

/// Initial iterate for the splitting iteration (unscaled primal and dual).
#[derive(Debug, Clone)]
pub struct WarmStart<T: Real = f64> {
    pub z: DVector<T>,
    pub y: DVector<T>,
}

impl<T: Real> From<&QpSolution<T>> for WarmStart<T> {
    fn from(s: &QpSolution<T>) -> Self {
        Self { z: s.z.clone(), y: s.y.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals<T> {
    pub primal: T,
    pub dual: T,
    pub comp_slack: T,
}

/// Recompute KKT residuals of a candidate primal/dual pair from scratch.
///
/// `primal = ‖clip(Cz, lb, ub) − Cz‖∞`, `dual = ‖Hz + g + Cᵀy‖∞`, and
/// `comp_slack` is the largest `|yᵢ|·gap` between a row and the bound its
/// multiplier points at (a multiplier pointing at an infinite bound counts
/// as `|yᵢ|`).
pub fn kkt_residuals<T: Real>(p: &QpProblem<T>, z: &DVector<T>, y: &DVector<T>) -> KktResiduals<T> {
    let cz = &p.c * z;
    let mut primal = T::zero();
    let mut comp = T::zero();
    for i in 0..cz.len() {
        let v = cz[i];
        let clipped = v.max(p.lb[i]).min(p.ub[i]);
        primal = primal.max((clipped - v).abs());
        let yi = y[i];
        if yi > T::zero() {
            let gap = if p.ub[i].finite() { (p.ub[i] - v).abs() } else { T::one() };
            comp = comp.max(yi * gap);
        } else if yi < T::zero() {
            let gap = if p.lb[i].finite() { (v - p.lb[i]).abs() } else { T::one() };
            comp = comp.max(-yi * gap);
        }
    }
    let r = &p.hc * z + &p.g + p.c.transpose() * y;
    KktResiduals { primal, dual: r.amax(), comp_slack: comp }
}

pub fn solve_qp<T: Real>(p: &QpProblem<T>, settings: QpSettings<T>) -> QpSolution<T> {
    QpSolver::new(settings).solve(p, None)
}

/// Reusable solver. Holds no problem data between calls; one instance per
/// thread.
#[derive(Debug, Clone)]
pub struct QpSolver<T: Real = f64> {
    pub settings: QpSettings<T>,
}

struct Scaled<T: Real> {
    p: CsrMatrix<T>,
    g: Vec<T>,
    c: CsrMatrix<T>,
    l: Vec<T>,
    u: Vec<T>,
    d: Vec<T>,
    e: Vec<T>,
    cost: T,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum RowKind {
    Free,
    Equality,
    Inequality,
}

struct Iterate<T> {
    x: Vec<T>,
    z: Vec<T>,
    y: Vec<T>,
}

impl<T: Real> QpSolver<T> {
    pub fn new(settings: QpSettings<T>) -> Self {
        Self { settings }
    }

    pub fn solve(&mut self, prob: &QpProblem<T>, warm: Option<&WarmStart<T>>) -> QpSolution<T> {
        let s = self.settings;
        let n = prob.num_vars();
        let m = prob.num_rows();
        let sc = scale_problem(prob, s.scaling_iters);

        let kinds: Vec<RowKind> = (0..m)
            .map(|i| {
                let (l, u) = (prob.lb[i], prob.ub[i]);
                if !l.finite() && !u.finite() {
                    RowKind::Free
                } else if l.finite() && u.finite() && u - l <= T::lit(1e-12) * T::one().max(l.abs()) {
                    RowKind::Equality
                } else {
                    RowKind::Inequality
                }
            })
            .collect();

        let envelope = envelope_of(&sc.p, &sc.c, None);
        let mut rho = s.rho;
        let mut rho_vec = rho_vector(&kinds, rho);
        let mut kkt = assemble_kkt(&sc, &envelope, &rho_vec, s.sigma);
        if kkt.factor().is_err() {
            // σ > 0 makes this unreachable for finite data
            return failed(prob, n, m);
        }

        let mut it = Iterate { x: vec![T::zero(); n], z: vec![T::zero(); m], y: vec![T::zero(); m] };
        if let Some(w) = warm {
            if w.z.len() == n && w.y.len() == m {
                for j in 0..n {
                    it.x[j] = w.z[j] / sc.d[j];
                }
                for i in 0..m {
                    it.y[i] = sc.cost * w.y[i] / sc.e[i];
                }
                sc.c.mul_vec(&it.x, &mut it.z);
                for i in 0..m {
                    it.z[i] = it.z[i].max(sc.l[i]).min(sc.u[i]);
                }
            }
        }

        let mut x_prev = it.x.clone();
        let mut y_prev = it.y.clone();
        let mut rhs = vec![T::zero(); n];
        let mut tmp_m = vec![T::zero(); m];
        let mut tmp_n = vec![T::zero(); n];
        let mut ztilde = vec![T::zero(); m];
        let mut last_polish_set: Option<Vec<i8>> = None;
        let mut best: Option<(T, Vec<T>, Vec<T>, Vec<T>)> = None;
        let alpha = s.alpha;
        let one_m_alpha = T::one() - alpha;

        let mut iter = 0;
        while iter < s.max_iter {
            iter += 1;
            x_prev.copy_from_slice(&it.x);
            y_prev.copy_from_slice(&it.y);

            // x-update
            for i in 0..m {
                tmp_m[i] = rho_vec[i] * it.z[i] - it.y[i];
            }
            sc.c.mul_t_vec(&tmp_m, &mut tmp_n);
            for j in 0..n {
                rhs[j] = s.sigma * it.x[j] - sc.g[j] + tmp_n[j];
            }
            kkt.solve_in_place(&mut rhs);
            sc.c.mul_vec(&rhs, &mut ztilde);
            for j in 0..n {
                it.x[j] = alpha * rhs[j] + one_m_alpha * it.x[j];
            }
            // z- and y-update
            for i in 0..m {
                let zhat = alpha * ztilde[i] + one_m_alpha * it.z[i];
                let znew = (zhat + it.y[i] / rho_vec[i]).max(sc.l[i]).min(sc.u[i]);
                it.y[i] += rho_vec[i] * (zhat - znew);
                it.z[i] = znew;
            }

            if iter % s.check_interval != 0 && iter != 1 {
                continue;
            }

            let res = residuals(&sc, &it, s);
            let score = (res.prim / res.eps_prim).max(res.dual / res.eps_dual);
            if best.as_ref().map_or(true, |b| score < b.0) {
                best = Some((score, it.x.clone(), it.z.clone(), it.y.clone()));
            }

            if res.prim <= res.eps_prim && res.dual <= res.eps_dual {
                if s.polish {
                    if let Some(sol) = polish(prob, &sc, &kinds, &it, s, iter) {
                        return sol;
                    }
                }
                return finish(prob, &sc, &it, QpStatus::Solved, iter, false);
            }

            // early polish once the iterate is close enough to expose the
            // active set
            if s.polish
                && res.prim <= T::lit(5e-2) * (T::one() + res.prim_scale)
                && res.dual <= T::lit(5e-2) * (T::one() + res.dual_scale)
            {
                let set = active_set(&sc, &kinds, &it);
                if last_polish_set.as_ref() != Some(&set) {
                    if let Some(sol) = polish(prob, &sc, &kinds, &it, s, iter) {
                        return sol;
                    }
                    last_polish_set = Some(set);
                }
            }

            if let Some(cert) = primal_infeasibility(&sc, &it.y, &y_prev, s.eps_prim_inf) {
                let mut sol = finish(prob, &sc, &it, QpStatus::PrimalInfeasible, iter, false);
                sol.certificate = Some(cert);
                return sol;
            }
            if let Some(cert) = dual_infeasibility(&sc, &kinds, &it.x, &x_prev, s.eps_dual_inf) {
                let mut sol = finish(prob, &sc, &it, QpStatus::DualInfeasible, iter, false);
                sol.certificate = Some(cert);
                return sol;
            }

            if s.adaptive_rho {
                let ratio = (res.prim_scaled / (res.prim_norm_scaled + T::lit(1e-30)))
                    / (res.dual_scaled / (res.dual_norm_scaled + T::lit(1e-30)) + T::lit(1e-30));
                let new_rho = (rho * ratio.sqrt()).max(T::lit(1e-6)).min(T::lit(1e6));
                if new_rho.finite() && (new_rho > T::lit(5.0) * rho || new_rho < rho / T::lit(5.0)) {
                    rho = new_rho;
                    rho_vec = rho_vector(&kinds, rho);
                    kkt = assemble_kkt(&sc, &envelope, &rho_vec, s.sigma);
                    if kkt.factor().is_err() {
                        break;
                    }
                }
            }
        }

        if let Some((_, x, z, y)) = best {
            it = Iterate { x, z, y };
        }
        if s.polish {
            if let Some(sol) = polish(prob, &sc, &kinds, &it, s, iter) {
                return sol;
            }
        }
        if sc.p.nnz() == 0 {
            if let Some(sol) = simplex_fallback(prob, s, iter) {
                return sol;
            }
        }
        finish(prob, &sc, &it, QpStatus::MaxIter, iter, false)
    }
}

/// LPs the splitting iteration could not certify are handed to the exact
/// simplex; its answer is accepted only if the KKT check passes.
fn simplex_fallback<T: Real>(prob: &QpProblem<T>, s: QpSettings<T>, iter: usize) -> Option<QpSolution<T>> {
    let done = |status, z: DVector<T>, y: DVector<T>, pivots: usize| {
        let r = kkt_residuals(prob, &z, &y);
        QpSolution {
            obj: prob.objective(&z),
            z,
            y,
            status,
            iters: iter + pivots,
            primal_res: r.primal,
            dual_res: r.dual,
            polished: false,
            certificate: None,
        }
    };
    let (n, m) = (prob.num_vars(), prob.num_rows());
    match solve_lp(prob, 50 * (n + m) + 100) {
        LpOutcome::Optimal { z, y, pivots } => {
            let r = kkt_residuals(prob, &z, &y);
            let cz = &prob.c * &z;
            let cty = prob.c.transpose() * &y;
            let eps_p = s.eps_abs + s.eps_rel * cz.amax();
            let eps_d = s.eps_abs + s.eps_rel * cty.amax().max(prob.g.amax());
            (r.primal <= eps_p && r.dual <= eps_d).then(|| done(QpStatus::Solved, z, y, pivots))
        }
        LpOutcome::Infeasible { pivots } => Some(done(QpStatus::PrimalInfeasible, DVector::zeros(n), DVector::zeros(m), pivots)),
        LpOutcome::Unbounded { pivots } => Some(done(QpStatus::DualInfeasible, DVector::zeros(n), DVector::zeros(m), pivots)),
        LpOutcome::Stalled { .. } => None,
    }
}

fn failed<T: Real>(prob: &QpProblem<T>, n: usize, m: usize) -> QpSolution<T> {
    let z = DVector::zeros(n);
    let y = DVector::zeros(m);
    let r = kkt_residuals(prob, &z, &y);
    QpSolution {
        obj: prob.objective(&z),
        z,
        y,
        status: QpStatus::MaxIter,
        iters: 0,
        primal_res: r.primal,
        dual_res: r.dual,
        polished: false,
        certificate: None,
    }
}

fn rho_vector<T: Real>(kinds: &[RowKind], rho: T) -> Vec<T> {
    kinds
        .iter()
        .map(|k| match k {
            RowKind::Free => T::lit(1e-6),
            RowKind::Equality => rho * T::lit(1e3),
            RowKind::Inequality => rho,
        })
        .collect()
}

fn assemble_kkt<T: Real>(sc: &Scaled<T>, envelope: &[usize], rho: &[T], sigma: T) -> EnvelopeCholesky<T> {
    let mut k = EnvelopeCholesky::with_profile(envelope.to_vec());
    for i in 0..sc.p.nrows {
        let (cols, vals) = sc.p.row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            if j <= i {
                k.add(i, j, v);
            }
        }
        k.add(i, i, sigma);
    }
    for r in 0..sc.c.nrows {
        let (cols, vals) = sc.c.row(r);
        let w = rho[r];
        for a in 0..cols.len() {
            for b in 0..=a {
                k.add(cols[a], cols[b], w * vals[a] * vals[b]);
            }
        }
    }
    k
}

/// Ruiz equilibration of `[P Cᵀ; C 0]` followed by cost scaling.
fn scale_problem<T: Real>(prob: &QpProblem<T>, iters: usize) -> Scaled<T> {
    let n = prob.num_vars();
    let m = prob.num_rows();
    let mut p = CsrMatrix::from_dense(&prob.hc);
    let mut c = CsrMatrix::from_dense(&prob.c);
    let mut d = vec![T::one(); n];
    let mut e = vec![T::one(); m];
    let clamp = |v: T| {
        if v < T::lit(1e-4) {
            T::one()
        } else {
            v.min(T::lit(1e4))
        }
    };
    for _ in 0..iters {
        let pc = p.col_inf_norms();
        let cc = c.col_inf_norms();
        let dd: Vec<T> = (0..n).map(|j| T::one() / clamp(pc[j].max(cc[j])).sqrt()).collect();
        let cr = c.row_inf_norms();
        let de: Vec<T> = (0..m).map(|i| T::one() / clamp(cr[i]).sqrt()).collect();
        p.scale(&dd, &dd);
        c.scale(&de, &dd);
        for j in 0..n {
            d[j] *= dd[j];
        }
        for i in 0..m {
            e[i] *= de[i];
        }
    }
    let mut g: Vec<T> = (0..n).map(|j| prob.g[j] * d[j]).collect();
    let pc = p.col_inf_norms();
    let mean_p = if n > 0 { pc.iter().fold(T::zero(), |a, &v| a + v) / T::from_usize(n).unwrap() } else { T::zero() };
    let gmax = inf_norm_vec(&g);
    let denom = clamp(mean_p.max(gmax));
    let cost = T::one() / denom;
    let ones = vec![cost; n];
    let unit = vec![T::one(); n];
    p.scale(&ones, &unit);
    g.iter_mut().for_each(|v| *v *= cost);
    let l = (0..m).map(|i| scale_bound(prob.lb[i], e[i])).collect();
    let u = (0..m).map(|i| scale_bound(prob.ub[i], e[i])).collect();
    Scaled { p, g, c, l, u, d, e, cost }
}

fn scale_bound<T: Real>(b: T, e: T) -> T {
    if b.finite() {
        b * e
    } else {
        b
    }
}

struct Residuals<T> {
    prim: T,
    dual: T,
    eps_prim: T,
    eps_dual: T,
    prim_scale: T,
    dual_scale: T,
    prim_scaled: T,
    dual_scaled: T,
    prim_norm_scaled: T,
    dual_norm_scaled: T,
}

fn residuals<T: Real>(sc: &Scaled<T>, it: &Iterate<T>, s: QpSettings<T>) -> Residuals<T> {
    let n = it.x.len();
    let m = it.z.len();
    let mut cx = vec![T::zero(); m];
    sc.c.mul_vec(&it.x, &mut cx);
    let mut px = vec![T::zero(); n];
    sc.p.mul_vec(&it.x, &mut px);
    let mut cty = vec![T::zero(); n];
    sc.c.mul_t_vec(&it.y, &mut cty);

    let mut prim = T::zero();
    let mut prim_scaled = T::zero();
    let mut cx_norm = T::zero();
    let mut z_norm = T::zero();
    let mut cx_ns = T::zero();
    let mut z_ns = T::zero();
    for i in 0..m {
        let r = cx[i] - it.z[i];
        prim = prim.max((r / sc.e[i]).abs());
        prim_scaled = prim_scaled.max(r.abs());
        cx_norm = cx_norm.max((cx[i] / sc.e[i]).abs());
        z_norm = z_norm.max((it.z[i] / sc.e[i]).abs());
        cx_ns = cx_ns.max(cx[i].abs());
        z_ns = z_ns.max(it.z[i].abs());
    }
    let mut dual = T::zero();
    let mut dual_scaled = T::zero();
    let (mut pxn, mut ctyn, mut gn) = (T::zero(), T::zero(), T::zero());
    let (mut pxs, mut ctys, mut gs) = (T::zero(), T::zero(), T::zero());
    let inv_c = T::one() / sc.cost;
    for j in 0..n {
        let r = px[j] + sc.g[j] + cty[j];
        dual = dual.max((r * inv_c / sc.d[j]).abs());
        dual_scaled = dual_scaled.max(r.abs());
        pxn = pxn.max((px[j] * inv_c / sc.d[j]).abs());
        ctyn = ctyn.max((cty[j] * inv_c / sc.d[j]).abs());
        gn = gn.max((sc.g[j] * inv_c / sc.d[j]).abs());
        pxs = pxs.max(px[j].abs());
        ctys = ctys.max(cty[j].abs());
        gs = gs.max(sc.g[j].abs());
    }
    let prim_scale = cx_norm.max(z_norm);
    let dual_scale = pxn.max(ctyn).max(gn);
    Residuals {
        prim,
        dual,
        eps_prim: s.eps_abs + s.eps_rel * prim_scale,
        eps_dual: s.eps_abs + s.eps_rel * dual_scale,
        prim_scale,
        dual_scale,
        prim_scaled,
        dual_scaled,
        prim_norm_scaled: cx_ns.max(z_ns),
        dual_norm_scaled: pxs.max(ctys).max(gs),
    }
}

fn primal_infeasibility<T: Real>(sc: &Scaled<T>, y: &[T], y_prev: &[T], eps: T) -> Option<DVector<T>> {
    let m = y.len();
    if m == 0 {
        return None;
    }
    // unscaled direction E·δy
    let mut dy: Vec<T> = (0..m).map(|i| (y[i] - y_prev[i]) * sc.e[i]).collect();
    let norm = inf_norm_vec(&dy);
    if norm <= T::lit(1e-30) {
        return None;
    }
    let thresh = eps * norm;
    for v in dy.iter_mut() {
        if v.abs() < thresh {
            *v = T::zero();
        }
    }
    let mut support = T::zero();
    for i in 0..m {
        let (l, u) = (sc.l[i] / sc.e[i], sc.u[i] / sc.e[i]);
        if dy[i] > T::zero() {
            if !u.finite() {
                return None;
            }
            support += u * dy[i];
        } else if dy[i] < T::zero() {
            if !l.finite() {
                return None;
            }
            support += l * dy[i];
        }
    }
    if support >= -thresh {
        return None;
    }
    // ‖Cᵀ dy‖ with C = E⁻¹ C̄ D⁻¹
    let scaled: Vec<T> = (0..m).map(|i| dy[i] / sc.e[i]).collect();
    let mut ct = vec![T::zero(); sc.c.ncols];
    sc.c.mul_t_vec(&scaled, &mut ct);
    let ctn = (0..ct.len()).fold(T::zero(), |a, j| a.max((ct[j] / sc.d[j]).abs()));
    if ctn <= thresh {
        Some(DVector::from_vec(dy))
    } else {
        None
    }
}

fn dual_infeasibility<T: Real>(
    sc: &Scaled<T>,
    kinds: &[RowKind],
    x: &[T],
    x_prev: &[T],
    eps: T,
) -> Option<DVector<T>> {
    let n = x.len();
    let dxs: Vec<T> = (0..n).map(|j| x[j] - x_prev[j]).collect();
    let dx: Vec<T> = (0..n).map(|j| dxs[j] * sc.d[j]).collect();
    let norm = inf_norm_vec(&dx);
    if norm <= T::lit(1e-30) {
        return None;
    }
    let thresh = eps * norm;
    // gᵀdx (unscaled): ḡ = c D g  ⇒ g·dx = ḡ·dxs / c
    let gdx = (0..n).fold(T::zero(), |a, j| a + sc.g[j] * dxs[j]) / sc.cost;
    if gdx >= -thresh {
        return None;
    }
    let mut pdx = vec![T::zero(); n];
    sc.p.mul_vec(&dxs, &mut pdx);
    let pn = (0..n).fold(T::zero(), |a, j| a.max((pdx[j] / (sc.d[j] * sc.cost)).abs()));
    if pn > thresh {
        return None;
    }
    let mut cdx = vec![T::zero(); sc.c.nrows];
    sc.c.mul_vec(&dxs, &mut cdx);
    for i in 0..cdx.len() {
        let v = cdx[i] / sc.e[i];
        let ok = match kinds[i] {
            RowKind::Free => true,
            _ => {
                let (l, u) = (sc.l[i], sc.u[i]);
                let up_ok = if u.finite() { v <= thresh } else { true };
                let lo_ok = if l.finite() { v >= -thresh } else { true };
                up_ok && lo_ok
            }
        };
        if !ok {
            return None;
        }
    }
    Some(DVector::from_vec(dx))
}

/// Active-set guess: -1 lower, +1 upper, 2 equality, 0 inactive.
fn active_set<T: Real>(sc: &Scaled<T>, kinds: &[RowKind], it: &Iterate<T>) -> Vec<i8> {
    (0..kinds.len())
        .map(|i| match kinds[i] {
            RowKind::Equality => 2,
            RowKind::Free => 0,
            RowKind::Inequality => {
                if sc.l[i].finite() && it.z[i] - sc.l[i] < -it.y[i] {
                    -1
                } else if sc.u[i].finite() && sc.u[i] - it.z[i] < it.y[i] {
                    1
                } else {
                    0
                }
            }
        })
        .collect()
}

fn polish<T: Real>(
    prob: &QpProblem<T>,
    sc: &Scaled<T>,
    kinds: &[RowKind],
    it: &Iterate<T>,
    s: QpSettings<T>,
    iter: usize,
) -> Option<QpSolution<T>> {
    let set = active_set(sc, kinds, it);
    let rows: Vec<usize> = (0..set.len()).filter(|&i| set[i] != 0).collect();
    if let Some(sol) = polish_on(prob, sc, it, &set, &rows, s, iter) {
        return Some(sol);
    }
    // Degenerate guesses (nearly parallel rows that cannot all be tight)
    // are retried on a linearly independent subset, strongest duals first.
    let pruned = independent_rows(sc, &set, &rows, &it.y);
    if pruned.len() < rows.len() {
        if let Some(sol) = polish_on(prob, sc, it, &set, &pruned, s, iter) {
            return Some(sol);
        }
    }
    if sc.p.nnz() == 0 {
        return vertex_polish(prob, sc, kinds, it, s, iter);
    }
    active_set_correction(prob, sc, kinds, it, set, s, iter)
}

/// Primal-dual active-set rounds from a rejected guess: rows whose multiplier
/// has the wrong sign leave, violated rows enter.
fn active_set_correction<T: Real>(
    prob: &QpProblem<T>,
    sc: &Scaled<T>,
    kinds: &[RowKind],
    it: &Iterate<T>,
    mut set: Vec<i8>,
    s: QpSettings<T>,
    iter: usize,
) -> Option<QpSolution<T>> {
    let m = kinds.len();
    let mut cx = vec![T::zero(); m];
    let mut seen: Vec<Vec<i8>> = vec![set.clone()];
    for _ in 0..POLISH_ACTIVE_SET_ROUNDS {
        // the δ-regularized solve tolerates dependent rows
        let rows: Vec<usize> = (0..m).filter(|&i| set[i] != 0).collect();
        let (x, ya) = reduced_kkt(sc, it, &set, &rows, s)?;
        if let Some(sol) = accept(prob, sc, &set, &rows, &x, &ya, s, iter) {
            return Some(sol);
        }
        sc.c.mul_vec(&x, &mut cx);
        let mut next = vec![0i8; m];
        let mut dual = vec![T::zero(); m];
        for (a, &r) in rows.iter().enumerate() {
            dual[r] = ya[a];
        }
        for i in 0..m {
            next[i] = match kinds[i] {
                RowKind::Equality => 2,
                RowKind::Free => 0,
                RowKind::Inequality => {
                    let tol = T::lit(1e-12) * (T::one() + cx[i].abs());
                    if rows.contains(&i) && set[i] * sign_of(dual[i]) >= 0 {
                        set[i]
                    } else if sc.u[i].finite() && cx[i] > sc.u[i] + tol {
                        1
                    } else if sc.l[i].finite() && cx[i] < sc.l[i] - tol {
                        -1
                    } else {
                        0
                    }
                }
            };
        }
        if seen.contains(&next) {
            return None;
        }
        seen.push(next.clone());
        set = next;
    }
    None
}

fn sign_of<T: Real>(v: T) -> i8 {
    if v > T::zero() {
        1
    } else if v < T::zero() {
        -1
    } else {
        0
    }
}

/// LP only: guess a vertex from the rows with the smallest slacks, enough of
/// them to span the space, and verify it through the KKT check.
fn vertex_polish<T: Real>(
    prob: &QpProblem<T>,
    sc: &Scaled<T>,
    kinds: &[RowKind],
    it: &Iterate<T>,
    s: QpSettings<T>,
    iter: usize,
) -> Option<QpSolution<T>> {
    let mut set = vec![0i8; kinds.len()];
    let mut slack: Vec<(T, usize)> = Vec::new();
    for i in 0..kinds.len() {
        match kinds[i] {
            RowKind::Equality => set[i] = 2,
            RowKind::Free => {}
            RowKind::Inequality => {
                let lo = if sc.l[i].finite() { it.z[i] - sc.l[i] } else { T::INFINITY };
                let hi = if sc.u[i].finite() { sc.u[i] - it.z[i] } else { T::INFINITY };
                set[i] = if hi <= lo { 1 } else { -1 };
                slack.push((lo.min(hi), i));
            }
        }
    }
    slack.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
    // independent_rows keeps equalities and then prefers larger weights
    let mut weight = vec![T::zero(); kinds.len()];
    let m = slack.len();
    for (rank, &(_, i)) in slack.iter().enumerate() {
        weight[i] = T::from_usize(m - rank).unwrap();
    }
    let candidates: Vec<usize> = (0..kinds.len()).filter(|&i| set[i] != 0).collect();
    let mut rows = independent_rows(sc, &set, &candidates, &weight);
    rows.retain(|&r| set[r] == 2 || weight[r] > T::zero());
    let n = sc.c.ncols;
    if rows.len() > n {
        rows.truncate(n);
    }
    for i in 0..set.len() {
        if set[i] != 2 && !rows.contains(&i) {
            set[i] = 0;
        }
    }
    polish_on(prob, sc, it, &set, &rows, s, iter)
}

fn independent_rows<T: Real>(sc: &Scaled<T>, set: &[i8], rows: &[usize], y: &[T]) -> Vec<usize> {
    let n = sc.c.ncols;
    let mut order: Vec<usize> = rows.iter().copied().filter(|&r| set[r] != 2).collect();
    order.sort_by(|&a, &b| y[b].abs().partial_cmp(&y[a].abs()).unwrap_or(std::cmp::Ordering::Equal));
    let mut basis: Vec<Vec<T>> = Vec::new();
    let eq: Vec<usize> = rows.iter().copied().filter(|&r| set[r] == 2).collect();
    let mut keep = eq.clone();
    for &r in eq.iter().chain(order.iter()) {
        let mut v = vec![T::zero(); n];
        let (cols, vals) = sc.c.row(r);
        for (&j, &a) in cols.iter().zip(vals) {
            v[j] = a;
        }
        let norm0 = v.iter().fold(T::zero(), |acc, &a| acc + a * a).sqrt();
        for b in &basis {
            let dot = v.iter().zip(b).fold(T::zero(), |acc, (&p, &q)| acc + p * q);
            for (vi, &bi) in v.iter_mut().zip(b) {
                *vi -= dot * bi;
            }
        }
        let norm = v.iter().fold(T::zero(), |acc, &a| acc + a * a).sqrt();
        if norm > T::lit(1e-6) * norm0 {
            v.iter_mut().for_each(|a| *a /= norm);
            basis.push(v);
            if set[r] != 2 {
                keep.push(r);
            }
        }
    }
    keep.sort_unstable();
    keep
}

fn polish_on<T: Real>(
    prob: &QpProblem<T>,
    sc: &Scaled<T>,
    it: &Iterate<T>,
    set: &[i8],
    rows: &[usize],
    s: QpSettings<T>,
    iter: usize,
) -> Option<QpSolution<T>> {
    let (x, ya) = reduced_kkt(sc, it, set, rows, s)?;
    accept(prob, sc, set, rows, &x, &ya, s, iter)
}

/// Solves the KKT system with the rows of `rows` held at their bounds (scaled
/// space) by regularized factorization plus iterative refinement.
fn reduced_kkt<T: Real>(sc: &Scaled<T>, it: &Iterate<T>, set: &[i8], rows: &[usize], s: QpSettings<T>) -> Option<(Vec<T>, Vec<T>)> {
    let n = sc.c.ncols;
    let targets: Vec<T> = rows.iter().map(|&i| if set[i] == 1 { sc.u[i] } else { sc.l[i] }).collect();
    let delta = s.polish_delta;

    let envelope = envelope_of(&sc.p, &sc.c, Some(rows));
    let mut k = EnvelopeCholesky::with_profile(envelope);
    for i in 0..n {
        let (cols, vals) = sc.p.row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            if j <= i {
                k.add(i, j, v);
            }
        }
        k.add(i, i, delta);
    }
    let inv_delta = T::one() / delta;
    for &r in rows {
        let (cols, vals) = sc.c.row(r);
        for a in 0..cols.len() {
            for b in 0..=a {
                k.add(cols[a], cols[b], inv_delta * vals[a] * vals[b]);
            }
        }
    }
    k.factor().ok()?;

    let na = rows.len();
    // regularized solve of [P+δI Aᵀ; A −δI][x;y] = [r1;r2]
    let solve_reg = |r1: &[T], r2: &[T]| -> (Vec<T>, Vec<T>) {
        let mut rhs = r1.to_vec();
        for (a, &r) in rows.iter().enumerate() {
            let (cols, vals) = sc.c.row(r);
            for (&j, &v) in cols.iter().zip(vals) {
                rhs[j] += v * r2[a] * inv_delta;
            }
        }
        k.solve_in_place(&mut rhs);
        let ya: Vec<T> = rows
            .iter()
            .enumerate()
            .map(|(a, &r)| {
                let (cols, vals) = sc.c.row(r);
                let ax = cols.iter().zip(vals).fold(T::zero(), |acc, (&j, &v)| acc + v * rhs[j]);
                (ax - r2[a]) * inv_delta
            })
            .collect();
        (rhs, ya)
    };

    let neg_g: Vec<T> = sc.g.iter().map(|&v| -v).collect();
    // Refinement starts at the splitting iterate, so on a non-unique optimal
    // face the result stays next to it instead of jumping to the min-norm point.
    let mut x = it.x.clone();
    let mut ya: Vec<T> = rows.iter().map(|&r| it.y[r]).collect();
    let mut px = vec![T::zero(); n];
    for _ in 0..s.polish_refine_iters {
        // residual of the unregularized KKT system
        sc.p.mul_vec(&x, &mut px);
        let mut r1: Vec<T> = (0..n).map(|j| neg_g[j] - px[j]).collect();
        let mut r2 = vec![T::zero(); na];
        for (a, &r) in rows.iter().enumerate() {
            let (cols, vals) = sc.c.row(r);
            let mut ax = T::zero();
            for (&j, &v) in cols.iter().zip(vals) {
                r1[j] -= v * ya[a];
                ax += v * x[j];
            }
            r2[a] = targets[a] - ax;
        }
        let rn = inf_norm_vec(&r1).max(inf_norm_vec(&r2));
        if rn <= T::lit(1e-15) {
            break;
        }
        let (dx, dy) = solve_reg(&r1, &r2);
        for j in 0..n {
            x[j] += dx[j];
        }
        for a in 0..na {
            ya[a] += dy[a];
        }
    }
    Some((x, ya))
}

/// Unscales a reduced KKT solution and verifies it against the original problem.
#[allow(clippy::too_many_arguments)]
fn accept<T: Real>(
    prob: &QpProblem<T>,
    sc: &Scaled<T>,
    set: &[i8],
    rows: &[usize],
    x: &[T],
    ya: &[T],
    s: QpSettings<T>,
    iter: usize,
) -> Option<QpSolution<T>> {
    let n = sc.c.ncols;
    let z = DVector::from_iterator(n, (0..n).map(|j| x[j] * sc.d[j]));
    let mut y = DVector::zeros(prob.num_rows());
    for (a, &r) in rows.iter().enumerate() {
        y[r] = ya[a] * sc.e[r] / sc.cost;
    }
    if z.iter().chain(y.iter()).any(|v| !v.finite()) {
        return None;
    }
    let cz = &prob.c * &z;
    let hz = &prob.hc * &z;
    let cty = prob.c.transpose() * &y;
    let res = kkt_residuals(prob, &z, &y);
    let eps_p = s.eps_abs + s.eps_rel * cz.amax();
    let eps_d = s.eps_abs + s.eps_rel * hz.amax().max(cty.amax()).max(prob.g.amax());
    if res.primal > eps_p || res.dual > eps_d {
        return None;
    }
    for (&r, &kind) in rows.iter().zip(rows.iter().map(|&r| &set[r])) {
        let sign_ok = match kind {
            1 => y[r] >= -eps_d,
            -1 => y[r] <= eps_d,
            _ => true,
        };
        if !sign_ok {
            return None;
        }
    }
    Some(QpSolution {
        obj: prob.objective(&z),
        z,
        y,
        status: QpStatus::Solved,
        iters: iter,
        primal_res: res.primal,
        dual_res: res.dual,
        polished: true,
        certificate: None,
    })
}

fn finish<T: Real>(
    prob: &QpProblem<T>,
    sc: &Scaled<T>,
    it: &Iterate<T>,
    status: QpStatus,
    iters: usize,
    polished: bool,
) -> QpSolution<T> {
    let n = it.x.len();
    let m = it.y.len();
    let z = DVector::from_iterator(n, (0..n).map(|j| it.x[j] * sc.d[j]));
    let y = DVector::from_iterator(m, (0..m).map(|i| it.y[i] * sc.e[i] / sc.cost));
    let r = kkt_residuals(prob, &z, &y);
    QpSolution {
        obj: prob.objective(&z),
        z,
        y,
        status,
        iters,
        primal_res: r.primal,
        dual_res: r.dual,
        polished,
        certificate: None,
    }
}
