mod common;

use common::{enum_support, random_polytope, unit, vertices};
use nalgebra::{DMatrix, DVector};
use psmpc::polytope::SetError;
use psmpc::Polytope;
use psmpc::qp::{solve_qp, QpProblem, QpSettings, QpStatus};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn support_matches_vertex_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    for n in 1..=3 {
        for _ in 0..40 {
            let p = random_polytope(&mut rng, n);
            for _ in 0..5 {
                let d = unit(&mut rng, n);
                let oracle = enum_support(&p, &d);
                let s = p.support(&d).unwrap();
                assert!((s - oracle).abs() <= 1e-7 * (1.0 + oracle.abs()), "n={n}: support {s} vs {oracle}");
                checked += 1;
            }
        }
    }
    assert_eq!(checked, 600);
}

#[test]
fn lp_mode_of_qp_solver_matches_vertex_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for n in 1..=3 {
        for _ in 0..30 {
            let p = random_polytope(&mut rng, n);
            let d = unit(&mut rng, n);
            let q = p.num_rows();
            let lp = QpProblem::linear(-&d, p.h().clone(), DVector::from_element(q, f64::NEG_INFINITY), p.b().clone()).unwrap();
            let sol = solve_qp(&lp, QpSettings::default());
            assert_eq!(sol.status, QpStatus::Solved);
            let oracle = enum_support(&p, &d);
            assert!((d.dot(&sol.z) - oracle).abs() <= 1e-6 * (1.0 + oracle.abs()), "n={n}");
        }
    }
}

#[test]
fn support_examples() {
    let bx = Polytope::from_box(&[-1.0, -1.0], &[1.0, 1.0]).unwrap();
    assert!((bx.support(&DVector::from_row_slice(&[1.0, 0.0])).unwrap() - 1.0).abs() < 1e-9);
    assert!((bx.support(&DVector::from_row_slice(&[1.0, 1.0])).unwrap() - 2.0).abs() < 1e-9);
    let simplex = Polytope::new(DMatrix::from_row_slice(3, 2, &[-1.0, 0.0, 0.0, -1.0, 1.0, 1.0]), DVector::from_row_slice(&[0.0, 0.0, 1.0])).unwrap();
    assert!((simplex.support(&DVector::from_row_slice(&[1.0, 1.0])).unwrap() - 1.0).abs() < 1e-9);
    let half = Polytope::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), DVector::from_row_slice(&[1.0])).unwrap();
    assert!(matches!(half.support(&DVector::from_row_slice(&[0.0, 1.0])), Err(SetError::Unbounded)));
}

#[test]
fn interval_intersections() {
    let a = Polytope::from_box(&[0.0], &[2.0]).unwrap();
    let b = Polytope::from_box(&[1.0], &[3.0]).unwrap();
    let c = a.intersect(&b).unwrap().remove_redundancy().unwrap();
    assert_eq!(c.num_rows(), 2);
    let (lo, hi) = c.bounding_box().unwrap();
    assert!((lo[0] - 1.0).abs() < 1e-9 && (hi[0] - 2.0).abs() < 1e-9);
    let inner = Polytope::from_box(&[-1.0], &[1.0]).unwrap();
    let outer = Polytope::from_box(&[-2.0], &[2.0]).unwrap();
    let r = inner.intersect(&outer).unwrap().remove_redundancy().unwrap();
    assert_eq!(r.b().as_slice().len(), 2);
    assert!(r.b().iter().all(|v| (v - 1.0).abs() < 1e-12));
    let empty = a.intersect(&Polytope::from_box(&[3.0], &[4.0]).unwrap()).unwrap();
    assert!(empty.is_empty().unwrap());
}

#[test]
fn membership_tolerance() {
    let p = Polytope::from_box(&[-1.0], &[1.0]).unwrap();
    assert!(p.contains(&DVector::from_row_slice(&[0.0])));
    assert!(p.contains(&DVector::from_row_slice(&[1.0])));
    assert!(!p.contains(&DVector::from_row_slice(&[1.0 + 1e-6])));
}

#[test]
fn redundancy_removal_keeps_vertices() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for n in 2..=3 {
        for _ in 0..10 {
            let p = random_polytope(&mut rng, n);
            let r = p.remove_redundancy().unwrap();
            assert!(r.num_rows() <= p.num_rows());
            let mut a: Vec<Vec<f64>> = vertices(&p).iter().map(|v| v.iter().map(|x| (x * 1e6).round()).collect()).collect();
            let mut b: Vec<Vec<f64>> = vertices(&r).iter().map(|v| v.iter().map(|x| (x * 1e6).round()).collect()).collect();
            a.sort_by(|x, y| x.partial_cmp(y).unwrap());
            a.dedup();
            b.sort_by(|x, y| x.partial_cmp(y).unwrap());
            b.dedup();
            assert_eq!(a, b);
        }
    }
}
