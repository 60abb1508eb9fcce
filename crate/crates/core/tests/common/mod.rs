#![allow(dead_code)]

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use psmpc::lti::DiscreteModel;
use psmpc::qp::QpProblem;
use psmpc::Polytope;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

/// Brute-force vertex list: every nonsingular `n`-subset of rows whose
/// solution satisfies all rows.
pub fn vertices(p: &Polytope) -> Vec<DVector<f64>> {
    let (h, b) = (p.h(), p.b());
    let (q, n) = (h.nrows(), h.ncols());
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..n).collect();
    loop {
        let hs = h.select_rows(&idx);
        let bs = b.select_rows(&idx);
        if hs.clone().determinant().abs() > 1e-10 {
            if let Some(x) = hs.lu().solve(&bs) {
                if p.contains_tol(&x, 1e-9) {
                    out.push(x);
                }
            }
        }
        // next combination
        let mut i = n;
        while i > 0 && idx[i - 1] == q - n + i - 1 {
            i -= 1;
        }
        if i == 0 {
            break;
        }
        idx[i - 1] += 1;
        for j in i..n {
            idx[j] = idx[j - 1] + 1;
        }
    }
    out
}

pub fn enum_support(p: &Polytope, d: &DVector<f64>) -> f64 {
    vertices(p).iter().map(|v| d.dot(v)).fold(f64::NEG_INFINITY, f64::max)
}

/// Unit-sample double integrator.
pub fn double_integrator() -> DiscreteModel {
    DiscreteModel {
        ad: DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]),
        bd: DMatrix::from_row_slice(2, 1, &[0.5, 1.0]),
        dt: 1.0,
    }
}

/// Whether `x` keeps `x ∈ X`, `−Kx ∈ U` along `steps` closed-loop steps.
pub fn admissible_forever(acl: &DMatrix<f64>, k: &DMatrix<f64>, x_set: &Polytope, u_set: &Polytope, x: &DVector<f64>, steps: usize) -> bool {
    let mut x = x.clone();
    for _ in 0..=steps {
        if !x_set.contains(&x) || !u_set.contains(&(-(k * &x))) {
            return false;
        }
        x = acl * x;
    }
    true
}

/// Strictly convex QP with a known feasible point; a few rows are equalities
/// and a few one-sided.
pub fn random_qp(seed: u64) -> QpProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = rng.random_range(2..=30);
    let q = rng.random_range(1..=60);
    let m = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
    let hc = m.transpose() * &m + DMatrix::identity(p, p) * 0.5;
    let g = DVector::from_fn(p, |_, _| rng.random_range(-5.0..5.0));
    let c = DMatrix::from_fn(q, p, |_, _| rng.random_range(-1.0..1.0));
    let z0 = DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0));
    let cz = &c * &z0;
    let mut lb = DVector::zeros(q);
    let mut ub = DVector::zeros(q);
    for i in 0..q {
        let kind = rng.random_range(0..10);
        let (a, b) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        match kind {
            0 => {
                lb[i] = cz[i];
                ub[i] = cz[i];
            }
            1 => {
                lb[i] = f64::NEG_INFINITY;
                ub[i] = cz[i] + b;
            }
            2 => {
                lb[i] = cz[i] - a;
                ub[i] = f64::INFINITY;
            }
            _ => {
                lb[i] = cz[i] - a;
                ub[i] = cz[i] + b;
            }
        }
    }
    // equality rows must stay independent
    let eq: Vec<usize> = (0..q).filter(|&i| lb[i] == ub[i]).collect();
    if eq.len() >= p {
        for &i in &eq[p - 1..] {
            lb[i] -= 0.5;
            ub[i] += 0.5;
        }
    }
    QpProblem::new(hc, g, c, lb, ub).unwrap()
}

/// Dual of `min ½zᵀHz + gᵀz s.t. l ≤ Cz ≤ u` with `y = a − b`, `a, b ≥ 0`,
/// maximized by accelerated projected gradient with restarts. Returns the
/// best dual value (a lower bound on the optimum).
pub fn dual_oracle(p: &QpProblem) -> f64 {
    let hinv = p.hc.clone().try_inverse().unwrap();
    let q = p.num_rows();
    let chc = &p.c * &hinv * p.c.transpose();
    let lip = 2.0 * chc.symmetric_eigenvalues().amax().max(1e-12);
    let step = 1.0 / lip;
    let value = |a: &DVector<f64>, b: &DVector<f64>| {
        let y = a - b;
        let w = &p.g + p.c.transpose() * &y;
        let mut v = -0.5 * w.dot(&(&hinv * &w));
        for i in 0..q {
            if a[i] > 0.0 {
                v -= a[i] * p.ub[i];
            }
            if b[i] > 0.0 {
                v += b[i] * p.lb[i];
            }
        }
        v
    };
    let proj = |v: f64, bound: f64| if bound.is_finite() { v.max(0.0) } else { 0.0 };
    let (mut a, mut b) = (DVector::zeros(q), DVector::zeros(q));
    let (mut ya, mut yb) = (a.clone(), b.clone());
    let mut t = 1.0f64;
    let mut best = value(&a, &b);
    let mut last = best;
    for k in 0..200_000 {
        let y = &ya - &yb;
        let z = -(&hinv * (&p.g + p.c.transpose() * &y));
        let cz = &p.c * &z;
        // gradient of the dual in a is Cz − u, in b is l − Cz
        let na = DVector::from_fn(q, |i, _| proj(ya[i] + step * (cz[i] - p.ub[i].min(1e300)), p.ub[i]));
        let nb = DVector::from_fn(q, |i, _| proj(yb[i] + step * (p.lb[i].max(-1e300) - cz[i]), p.lb[i]));
        let tn = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let v = value(&na, &nb);
        if v < last {
            // restart momentum
            ya = na.clone();
            yb = nb.clone();
            t = 1.0;
        } else {
            ya = &na + (&na - &a) * ((t - 1.0) / tn);
            yb = &nb + (&nb - &b) * ((t - 1.0) / tn);
            t = tn;
        }
        a = na;
        b = nb;
        last = v;
        best = best.max(v);
        if k % 500 == 499 && (v - best).abs() <= 1e-13 * (1.0 + v.abs()) && k > 5000 {
            break;
        }
    }
    best
}

pub fn unit(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        if v.norm() > 1e-3 {
            return v.normalize();
        }
    }
}

/// Random bounded polytope around the origin: a box plus random cuts.
pub fn random_polytope(rng: &mut ChaCha8Rng, n: usize) -> Polytope {
    let lo: Vec<f64> = (0..n).map(|_| -rng.random_range(0.5..2.0)).collect();
    let hi: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
    let bx = Polytope::from_box(&lo, &hi).unwrap();
    let k = rng.random_range(1..8);
    let g = DMatrix::from_fn(k, n, |_, _| rng.random_range(-1.0..1.0));
    let h = DVector::from_fn(k, |_, _| rng.random_range(0.2..1.5));
    bx.with_rows(&g, &h).unwrap()
}

