mod common;

use common::{admissible_forever, double_integrator};
use nalgebra::{DMatrix, DVector};
use psmpc::terminal::{dare_residual, lqr_gain, solve_dare, synthesize_kit, TerminalSettings};
use psmpc::Polytope;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DARE_TOL: f64 = 1e-9;
const GRID_AGREEMENT: f64 = 0.99;
const MAXIMALITY: f64 = 0.95;

fn di_sets() -> (Polytope, Polytope) {
    (Polytope::from_box(&[-25.0, -5.0], &[25.0, 5.0]).unwrap(), Polytope::from_box(&[-1.0], &[1.0]).unwrap())
}

#[test]
fn scalar_dare_closed_form() {
    let (a, b, q, r) = (1.2f64, 0.7f64, 2.0f64, 0.5f64);
    // b²P² + (r − a²r − qb²)P − qr = 0
    let (qa, qb, qc) = (b * b, r - a * a * r - q * b * b, -q * r);
    let exact = (-qb + (qb * qb - 4.0 * qa * qc).sqrt()) / (2.0 * qa);
    let m = |v: f64| DMatrix::from_element(1, 1, v);
    let p = solve_dare(&m(a), &m(b), &m(q), &m(r)).unwrap();
    assert!((p[(0, 0)] - exact).abs() < 1e-9 * exact);
    let k = lqr_gain(&p, &m(a), &m(b), &m(r)).unwrap();
    assert!((k[(0, 0)] - a * b * exact / (r + b * b * exact)).abs() < 1e-12);
    assert!((a - b * k[(0, 0)]).abs() < 1.0);
}

#[test]
fn double_integrator_dare_residual() {
    let m = double_integrator();
    let (q, r) = (DMatrix::identity(2, 2), DMatrix::identity(1, 1));
    let p = solve_dare(&m.ad, &m.bd, &q, &r).unwrap();
    assert!(dare_residual(&p, &m.ad, &m.bd, &q, &r) <= DARE_TOL);
    assert!(p.clone().cholesky().is_some());
}

#[test]
fn double_integrator_moas_matches_simulation_grid() {
    let m = double_integrator();
    let (xs, us) = di_sets();
    let kit = synthesize_kit(&m, &DMatrix::from_diagonal(&DVector::from_row_slice(&[1.0, 0.1])), &DMatrix::from_element(1, 1, 10.0), &xs, &us, &TerminalSettings::default()).unwrap();
    // grid over the set's bounding box enlarged by 30%
    let (lo, hi) = kit.xn.bounding_box().unwrap();
    let (mid, half) = ((&lo + &hi) * 0.5, (&hi - &lo) * 0.65);
    let (cells, mut agree, mut inside) = (120usize, 0usize, 0usize);
    for i in 0..cells {
        for j in 0..cells {
            let x = DVector::from_row_slice(&[
                mid[0] + half[0] * (2.0 * (i as f64 + 0.5) / cells as f64 - 1.0),
                mid[1] + half[1] * (2.0 * (j as f64 + 0.5) / cells as f64 - 1.0),
            ]);
            let truth = admissible_forever(&kit.acl, &kit.k, &xs, &us, &x, 300);
            inside += truth as usize;
            if truth == kit.xn.contains(&x) {
                agree += 1;
            }
        }
    }
    let frac = agree as f64 / (cells * cells) as f64;
    println!("MOAS grid agreement {frac:.4}, {inside} admissible cells, {} rows, t* = {}", kit.xn.num_rows(), kit.t_star);
    assert!(frac >= GRID_AGREEMENT);
    // the set must be a real share of the grid, not a sliver
    assert!(inside * 10 > cells * cells);
}

#[test]
fn double_integrator_moas_invariance_and_maximality() {
    let m = double_integrator();
    let (xs, us) = di_sets();
    let kit = synthesize_kit(&m, &DMatrix::identity(2, 2), &DMatrix::identity(1, 1), &xs, &us, &TerminalSettings::default()).unwrap();
    let (lo, hi) = kit.xn.bounding_box().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut n = 0;
    while n < 10_000 {
        let x = DVector::from_fn(2, |i, _| rng.random_range(lo[i]..hi[i]));
        if !kit.xn.contains(&x) {
            continue;
        }
        n += 1;
        assert!(kit.xn.contains_tol(&(&kit.acl * &x), 1e-7));
        assert!(us.contains_tol(&(-(&kit.k * &x)), 1e-7));
    }
    let mut outside = 0;
    let dirs = 400;
    for d in 0..dirs {
        let th = std::f64::consts::TAU * d as f64 / dirs as f64;
        let dir = DVector::from_row_slice(&[th.cos(), th.sin()]);
        let hd = kit.xn.h() * &dir;
        let t = (0..hd.len()).filter(|&i| hd[i] > 0.0).map(|i| kit.xn.b()[i] / hd[i]).fold(f64::INFINITY, f64::min);
        if !admissible_forever(&kit.acl, &kit.k, &xs, &us, &(&dir * (1.02 * t)), 200) {
            outside += 1;
        }
    }
    let frac = outside as f64 / dirs as f64;
    println!("boundary directions leaving the constraints: {frac:.3}");
    assert!(frac >= MAXIMALITY);
}

#[test]
fn single_precision_kit() {
    let m = double_integrator();
    let m32 = psmpc::lti::DiscreteModel::<f32> { ad: m.ad.cast(), bd: m.bd.cast(), dt: 1.0 };
    let xs = psmpc::Polytope32::from_box(&[-5.0, -2.0], &[5.0, 2.0]).unwrap();
    let us = psmpc::Polytope32::from_box(&[-1.0], &[1.0]).unwrap();
    let settings = TerminalSettings { max_t: 200, cert_tol: 1e-4 };
    let kit = synthesize_kit(&m32, &DMatrix::identity(2, 2), &DMatrix::identity(1, 1), &xs, &us, &settings).unwrap();
    assert!(kit.dare_residual < 1e-3);
    assert!(kit.xn.contains(&DVector::zeros(2)));
}
