//! Terminal ingredients: Riccati penalty, LQR gain, maximal output
//! admissible terminal set, and the cross-controller invariance check.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{inf_norm_mat, spectral_radius};
use crate::lti::DiscreteModel;
use crate::polytope::{lp_solver, Polytope, SetError};
use crate::scalar::Real;

pub const DARE_MAX_ITER: usize = 100_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TerminalError {
    #[error("not stabilizable: {0}")]
    NotStabilizable(String),
    #[error("output admissible set not finitely determined within {max_t} steps ({diagnostic})")]
    NotFinitelyDetermined { max_t: usize, diagnostic: String },
    #[error(transparent)]
    Set(#[from] SetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TerminalSettings {
    pub max_t: usize,
    pub cert_tol: f64,
}

impl Default for TerminalSettings {
    fn default() -> Self {
        Self { max_t: 500, cert_tol: 1e-7 }
    }
}

/// Terminal penalty `P`, terminal law `u = −Kx`, terminal set and the
/// closed-loop matrix they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalKit<T: Real = f64> {
    pub p: DMatrix<T>,
    pub k: DMatrix<T>,
    pub xn: Polytope<T>,
    pub acl: DMatrix<T>,
    pub t_star: usize,
    pub dare_residual: T,
}

/// Riccati recursion `P ← AᵀPA − AᵀPB(R+BᵀPB)⁻¹BᵀPA + Q` from `P = Q`.
pub fn solve_dare<T: Real>(
    ad: &DMatrix<T>,
    bd: &DMatrix<T>,
    q: &DMatrix<T>,
    r: &DMatrix<T>,
) -> Result<DMatrix<T>, TerminalError> {
    let tol = T::lit(1e-12).max(T::EPSILON * T::lit(100.0));
    let mut p = q.clone();
    for _ in 0..DARE_MAX_ITER {
        let next = riccati_map(ad, bd, q, r, &p)?;
        let delta = inf_norm_mat(&(&next - &p));
        let scale = T::one().max(inf_norm_mat(&next));
        p = next;
        if !delta.finite() {
            break;
        }
        if delta <= tol * scale {
            let k = lqr_gain(&p, ad, bd, r)?;
            let rho = spectral_radius(&(ad - bd * &k));
            if rho >= T::one() {
                return Err(TerminalError::NotStabilizable(format!("closed-loop spectral radius {rho}")));
            }
            return Ok(p);
        }
    }
    Err(TerminalError::NotStabilizable("Riccati recursion did not converge".into()))
}

fn riccati_map<T: Real>(
    ad: &DMatrix<T>,
    bd: &DMatrix<T>,
    q: &DMatrix<T>,
    r: &DMatrix<T>,
    p: &DMatrix<T>,
) -> Result<DMatrix<T>, TerminalError> {
    let pa = p * ad;
    let pb = p * bd;
    let s = r + bd.transpose() * &pb;
    let chol = s
        .cholesky()
        .ok_or_else(|| TerminalError::NotStabilizable("R + BᵀPB is not positive definite".into()))?;
    let bpa = bd.transpose() * &pa;
    let next = ad.transpose() * &pa - (ad.transpose() * &pb) * chol.solve(&bpa) + q;
    Ok((&next + next.transpose()) * T::lit(0.5))
}

/// `‖P − riccati(P)‖∞`.
pub fn dare_residual<T: Real>(
    p: &DMatrix<T>,
    ad: &DMatrix<T>,
    bd: &DMatrix<T>,
    q: &DMatrix<T>,
    r: &DMatrix<T>,
) -> T {
    match riccati_map(ad, bd, q, r, p) {
        Ok(next) => inf_norm_mat(&(p - next)),
        Err(_) => T::INFINITY,
    }
}

/// `K = (R + BᵀPB)⁻¹BᵀPA`.
pub fn lqr_gain<T: Real>(
    p: &DMatrix<T>,
    ad: &DMatrix<T>,
    bd: &DMatrix<T>,
    r: &DMatrix<T>,
) -> Result<DMatrix<T>, TerminalError> {
    let s = r + bd.transpose() * p * bd;
    let chol = s
        .cholesky()
        .ok_or_else(|| TerminalError::NotStabilizable("R + BᵀPB is singular".into()))?;
    Ok(chol.solve(&(bd.transpose() * p * ad)))
}

/// Output constraints `G x ≤ g` for `y = (x, −Kx) ∈ X × U`.
fn output_map<T: Real>(x: &Polytope<T>, u: &Polytope<T>, k: &DMatrix<T>) -> (DMatrix<T>, DVector<T>) {
    let qx = x.num_rows();
    let qu = u.num_rows();
    let mut g = DMatrix::zeros(qx + qu, x.dim());
    g.rows_mut(0, qx).copy_from(x.h());
    g.rows_mut(qx, qu).copy_from(&(-(u.h() * k)));
    let rhs = DVector::from_iterator(qx + qu, x.b().iter().chain(u.b().iter()).copied());
    (g, rhs)
}

/// Rows of `G` (with offsets `g`) that are not implied by `set` within `tol`.
fn violated_rows<T: Real>(set: &Polytope<T>, g: &DMatrix<T>, rhs: &DVector<T>, tol: T) -> Result<Vec<usize>, SetError> {
    let mut solver = lp_solver();
    let mut out = Vec::new();
    for r in 0..g.nrows() {
        let d = g.row(r).transpose();
        let norm = d.norm();
        if norm <= T::lit(1e-14) {
            if rhs[r] < -tol {
                return Err(SetError::EmptySet);
            }
            continue;
        }
        let s = set.support_with(&mut solver, &(d / norm))?;
        if s > rhs[r] / norm + tol {
            out.push(r);
        }
    }
    Ok(out)
}

/// Maximal output admissible set of `x⁺ = Acl x` under `x ∈ X`, `−Kx ∈ U`.
/// Returns the reduced set and the determinability index `t*`.
pub fn compute_moas<T: Real>(
    acl: &DMatrix<T>,
    x: &Polytope<T>,
    u: &Polytope<T>,
    k: &DMatrix<T>,
    max_t: usize,
    tol: T,
) -> Result<(Polytope<T>, usize), TerminalError> {
    let (g, rhs) = output_map(x, u, k);
    let mut o = x.with_rows(&(-(u.h() * k)), u.b())?;
    let mut gt = g;
    for t in 0..max_t {
        gt = &gt * acl;
        let add = violated_rows(&o, &gt, &rhs, tol)?;
        if add.is_empty() {
            return Ok((o.remove_redundancy()?, t));
        }
        o = o.with_rows(&gt.select_rows(&add), &rhs.select_rows(&add))?;
        if t % 10 == 9 {
            o = o.remove_redundancy()?;
        }
    }
    Err(TerminalError::NotFinitelyDetermined {
        max_t,
        diagnostic: format!("{} rows after {max_t} steps, spectral radius {}", o.num_rows(), spectral_radius(acl)),
    })
}

/// DARE, gain and output admissible set for one controller.
pub fn synthesize_kit<T: Real>(
    model: &DiscreteModel<T>,
    q: &DMatrix<T>,
    r: &DMatrix<T>,
    x: &Polytope<T>,
    u: &Polytope<T>,
    settings: &TerminalSettings,
) -> Result<TerminalKit<T>, TerminalError> {
    let p = solve_dare(&model.ad, &model.bd, q, r)?;
    let k = lqr_gain(&p, &model.ad, &model.bd, r)?;
    let acl = &model.ad - &model.bd * &k;
    let (xn, t_star) = compute_moas(&acl, x, u, &k, settings.max_t, T::lit(settings.cert_tol))?;
    let dare_residual = dare_residual(&p, &model.ad, &model.bd, q, r);
    Ok(TerminalKit { p, k, xn, acl, t_star, dare_residual })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KitCert {
    pub index: usize,
    pub dare_residual: f64,
    pub spectral_radius: f64,
    pub t_star: usize,
    pub terminal_rows: usize,
}

/// Margins are `max(support − offset)`; non-positive (up to `tol`) passes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCert {
    pub gain: usize,
    pub set: usize,
    pub invariance_margin: f64,
    pub input_margin: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertReport {
    pub kits: Vec<KitCert>,
    pub pairs: Vec<PairCert>,
    pub tol: f64,
    pub beta: f64,
    pub common_set: bool,
    pub pass: bool,
}

impl CertReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "terminal ingredients");
        for k in &self.kits {
            let _ = writeln!(
                s,
                "  kit {}: dare_residual={:.3e} spectral_radius={:.6} t*={} rows={}",
                k.index, k.dare_residual, k.spectral_radius, k.t_star, k.terminal_rows
            );
        }
        let _ = writeln!(s, "cross invariance (tol {:.1e})", self.tol);
        for p in &self.pairs {
            let _ = writeln!(
                s,
                "  K_{} on X^N_{}: invariance {:+.3e} input {:+.3e} {}",
                p.gain,
                p.set,
                p.invariance_margin,
                p.input_margin,
                if p.pass { "PASS" } else { "FAIL" }
            );
        }
        let _ = writeln!(s, "beta = {}", self.beta);
        if self.beta < 1.0 {
            let _ = writeln!(s, "  terminal sets shrunk by beta");
        }
        if self.common_set {
            let _ = writeln!(s, "  terminal sets replaced by a common invariant admissible set");
        }
        let _ = writeln!(s, "result: {}", if self.pass { "PASS" } else { "FAIL" });
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// For every ordered pair `(i, l)`: is `X^N_l` invariant under
/// `A_l − B_l K_i`, and does `−K_i x ∈ U_l` hold on it?
pub fn check_assumption5<T: Real>(
    kits: &[TerminalKit<T>],
    models: &[DiscreteModel<T>],
    u_sets: &[Polytope<T>],
    tol: f64,
) -> Result<CertReport, TerminalError> {
    let mut pairs = Vec::new();
    let mut solver = lp_solver();
    for (i, ki) in kits.iter().enumerate() {
        for (l, kl) in kits.iter().enumerate() {
            let set = &kl.xn;
            let acl = &models[l].ad - &models[l].bd * &ki.k;
            let mut inv = f64::NEG_INFINITY;
            for r in 0..set.num_rows() {
                let d = acl.transpose() * set.h().row(r).transpose();
                let s = set.support_with(&mut solver, &d)?;
                inv = inv.max((s - set.b()[r]).to_f64_lossy());
            }
            let mut inp = f64::NEG_INFINITY;
            let u = &u_sets[l];
            for r in 0..u.num_rows() {
                let d = -(ki.k.transpose() * u.h().row(r).transpose());
                let s = set.support_with(&mut solver, &d)?;
                inp = inp.max((s - u.b()[r]).to_f64_lossy());
            }
            pairs.push(PairCert {
                gain: i,
                set: l,
                invariance_margin: inv,
                input_margin: inp,
                pass: inv <= tol && inp <= tol,
            });
        }
    }
    let pass = pairs.iter().all(|p| p.pass);
    let kits = kits
        .iter()
        .enumerate()
        .map(|(i, k)| KitCert {
            index: i,
            dare_residual: k.dare_residual.to_f64_lossy(),
            spectral_radius: spectral_radius(&k.acl).to_f64_lossy(),
            t_star: k.t_star,
            terminal_rows: k.xn.num_rows(),
        })
        .collect();
    Ok(CertReport { kits, pairs, tol, beta: 1.0, common_set: false, pass })
}

/// Largest set inside every `X_l` that is admissible for every `(K_i, U_l)`
/// and invariant under every `A_l − B_l K_i`.
pub fn common_admissible_set<T: Real>(
    kits: &[TerminalKit<T>],
    models: &[DiscreteModel<T>],
    x_sets: &[Polytope<T>],
    u_sets: &[Polytope<T>],
    settings: &TerminalSettings,
) -> Result<(Polytope<T>, usize), TerminalError> {
    let tol = T::lit(settings.cert_tol);
    let mut o = x_sets[0].clone();
    for x in &x_sets[1..] {
        o = o.intersect(x)?;
    }
    for ki in kits {
        for u in u_sets {
            o = o.with_rows(&(-(u.h() * &ki.k)), u.b())?;
        }
    }
    o = o.remove_redundancy()?;
    let mut maps = Vec::new();
    for ki in kits {
        for m in models {
            let acl = &m.ad - &m.bd * &ki.k;
            if !maps.contains(&acl) {
                maps.push(acl);
            }
        }
    }
    for t in 0..settings.max_t {
        let mut rows_h: Vec<DMatrix<T>> = Vec::new();
        let mut rows_b: Vec<DVector<T>> = Vec::new();
        for acl in &maps {
            let pre = o.h() * acl;
            let add = violated_rows(&o, &pre, o.b(), tol)?;
            if !add.is_empty() {
                rows_h.push(pre.select_rows(&add));
                rows_b.push(o.b().select_rows(&add));
            }
        }
        if rows_h.is_empty() {
            return Ok((o, t));
        }
        for (h, b) in rows_h.iter().zip(&rows_b) {
            o = o.with_rows(h, b)?;
        }
        o = o.remove_redundancy()?;
    }
    Err(TerminalError::NotFinitelyDetermined {
        max_t: settings.max_t,
        diagnostic: format!("common set still has {} rows", o.num_rows()),
    })
}

/// Check the cross-invariance condition and, if it fails, repair the
/// terminal sets: a failing invariance part switches every kit to the common
/// invariant set; a failing input part alone is fixed by scaling all sets by
/// a common `β` found by bisection.
pub fn enforce_assumption5<T: Real>(
    kits: &mut [TerminalKit<T>],
    models: &[DiscreteModel<T>],
    x_sets: &[Polytope<T>],
    u_sets: &[Polytope<T>],
    settings: &TerminalSettings,
) -> Result<CertReport, TerminalError> {
    let tol = settings.cert_tol;
    let report = check_assumption5(kits, models, u_sets, tol)?;
    if report.pass {
        return Ok(report);
    }
    let mut common = false;
    if report.pairs.iter().any(|p| p.invariance_margin > tol) {
        let (set, t) = common_admissible_set(kits, models, x_sets, u_sets, settings)?;
        log::warn!("terminal sets not cross-invariant; using common invariant set ({} rows, {t} steps)", set.num_rows());
        for k in kits.iter_mut() {
            k.xn = set.clone();
        }
        common = true;
        let mut r = check_assumption5(kits, models, u_sets, tol)?;
        r.common_set = true;
        if r.pass {
            return Ok(r);
        }
    }
    let originals: Vec<Polytope<T>> = kits.iter().map(|k| k.xn.clone()).collect();
    let passes = |beta: f64, kits: &mut [TerminalKit<T>]| -> Result<bool, TerminalError> {
        for (k, o) in kits.iter_mut().zip(&originals) {
            k.xn = o.scaled(T::lit(beta));
        }
        Ok(check_assumption5(kits, models, u_sets, tol)?.pass)
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..20 {
        let mid = 0.5 * (lo + hi);
        if passes(mid, kits)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let beta = lo;
    for (k, o) in kits.iter_mut().zip(&originals) {
        k.xn = o.scaled(T::lit(beta));
    }
    let mut r = check_assumption5(kits, models, u_sets, tol)?;
    r.beta = beta;
    r.common_set = common;
    r.pass = r.pass && beta > 0.0;
    if beta < 1.0 {
        log::warn!("terminal sets shrunk by beta = {beta}");
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn deadbeat_plant() {
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let p = solve_dare(&DMatrix::zeros(2, 2), &b, &q, &s(1.0)).unwrap();
        assert_abs_diff_eq!(p, q, epsilon = 1e-14);
        let k = lqr_gain(&p, &DMatrix::zeros(2, 2), &b, &s(1.0)).unwrap();
        assert_eq!(k.amax(), 0.0);
    }

    #[test]
    fn scalar_dare() {
        let p = solve_dare(&s(0.5), &s(1.0), &s(1.0), &s(1.0)).unwrap();
        assert_abs_diff_eq!(p[(0, 0)], (0.25 + 4.0625f64.sqrt()) / 2.0, epsilon = 1e-11);
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        let p = solve_dare(&s(1.0), &s(1.0), &s(1.0), &s(1.0)).unwrap();
        assert_abs_diff_eq!(p[(0, 0)], phi, epsilon = 1e-11);
        let k = lqr_gain(&p, &s(1.0), &s(1.0), &s(1.0)).unwrap();
        assert_abs_diff_eq!(k[(0, 0)], phi / (1.0 + phi), epsilon = 1e-11);
        assert!(dare_residual(&p, &s(1.0), &s(1.0), &s(1.0), &s(1.0)) < 1e-12);
    }

    #[test]
    fn unstabilizable() {
        let r = solve_dare(&s(2.0), &s(0.0), &s(1.0), &s(1.0));
        assert!(matches!(r, Err(TerminalError::NotStabilizable(_))));
    }

    #[test]
    fn moas_deadbeat() {
        let x = Polytope::from_box(&[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        let u = Polytope::from_box(&[-0.5], &[0.5]).unwrap();
        let k = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let (xn, t) = compute_moas(&DMatrix::zeros(2, 2), &x, &u, &k, 50, 1e-7).unwrap();
        assert_eq!(t, 0);
        let (lo, hi) = xn.bounding_box().unwrap();
        assert_abs_diff_eq!(hi[0], 0.5, epsilon = 1e-7);
        assert_abs_diff_eq!(lo[0], -0.5, epsilon = 1e-7);
        assert_abs_diff_eq!(hi[1], 1.0, epsilon = 1e-7);
    }

    #[test]
    fn moas_scalar() {
        let x = Polytope::from_box(&[-1.0], &[1.0]).unwrap();
        let (xn, t) = compute_moas(&s(0.5), &x, &x, &s(0.5), 50, 1e-7).unwrap();
        assert_eq!(t, 0);
        assert_eq!(xn.num_rows(), 2);
        assert_abs_diff_eq!(xn.support(&DVector::from_element(1, 1.0)).unwrap(), 1.0, epsilon = 1e-8);
    }

    #[test]
    fn moas_not_determined() {
        let x = Polytope::from_box(&[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        let u = Polytope::from_box(&[-1.0], &[1.0]).unwrap();
        let (c, sn) = (0.3f64.cos(), 0.3f64.sin());
        let rot = DMatrix::from_row_slice(2, 2, &[c, -sn, sn, c]) * 0.9999;
        let k = DMatrix::zeros(1, 2);
        let r = compute_moas(&rot, &x, &u, &k, 3, 1e-7);
        assert!(matches!(r, Err(TerminalError::NotFinitelyDetermined { .. })));
    }

    fn double_integrator() -> DiscreteModel<f64> {
        DiscreteModel {
            ad: DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]),
            bd: DMatrix::from_row_slice(2, 1, &[0.005, 0.1]),
            dt: 0.1,
        }
    }

    #[test]
    fn self_pair_passes() {
        let m = double_integrator();
        let x = Polytope::from_box(&[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        let u = Polytope::from_box(&[-1.0], &[1.0]).unwrap();
        let kit = synthesize_kit(&m, &DMatrix::identity(2, 2), &s(1.0), &x, &u, &TerminalSettings::default()).unwrap();
        let rep = check_assumption5(&[kit.clone()], &[m.clone()], &[u.clone()], 1e-7).unwrap();
        assert!(rep.pass);
        let rep = check_assumption5(&[kit.clone(), kit], &[m.clone(), m], &[u.clone(), u], 1e-7).unwrap();
        assert!(rep.pass);
        assert_eq!(rep.pairs.len(), 4);
        let m0 = rep.pairs[0].invariance_margin;
        assert!(rep.pairs.iter().all(|p| p.invariance_margin == m0));
    }

    #[test]
    fn enforcement_repairs_failing_pair() {
        let m = double_integrator();
        let x = Polytope::from_box(&[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        let u = Polytope::from_box(&[-1.0], &[1.0]).unwrap();
        let st = TerminalSettings::default();
        let soft = synthesize_kit(&m, &DMatrix::identity(2, 2), &s(100.0), &x, &u, &st).unwrap();
        let hard = synthesize_kit(&m, &(DMatrix::identity(2, 2) * 100.0), &s(0.01), &x, &u, &st).unwrap();
        let mut kits = vec![soft, hard];
        let ms = vec![m.clone(), m];
        let before = check_assumption5(&kits, &ms, &[u.clone(), u.clone()], 1e-7).unwrap();
        assert!(!before.pass);
        let rep = enforce_assumption5(&mut kits, &ms, &[x.clone(), x], &[u.clone(), u.clone()], &st).unwrap();
        assert!(rep.pass, "{}", rep.to_text());
        assert!(rep.common_set || rep.beta < 1.0);
        let again = check_assumption5(&kits, &ms, &[u.clone(), u], 1e-7).unwrap();
        assert!(again.pass);
    }
}
