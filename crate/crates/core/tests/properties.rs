mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use psmpc::lti::{integrate_plant, zoh_discretize};
use psmpc::qp::{kkt_residuals, solve_qp, QpProblem, QpSettings, QpStatus};
use psmpc::scenario::ScenarioFile;
use psmpc::supervisor::{
    decide, permission_nominal, permission_robust, super_objective, update_records, ActivationRecord, Candidate, EnergyParams,
    Mode, SupervisorParams, SwitchState,
};
use psmpc::{ContinuousLti, Polytope};

fn aircraft() -> (ContinuousLti, Polytope, Polytope) {
    let f = ScenarioFile::load(&common::scenario_path("aircraft_nominal.toml")).unwrap();
    let sc = f.resolve().unwrap();
    (sc.plant, sc.x_set, sc.u_set)
}

fn in_box(p: &Polytope, t: &[f64]) -> DVector<f64> {
    let (lo, hi) = p.bounding_box().unwrap();
    DVector::from_fn(lo.len(), |i, _| lo[i] + (hi[i] - lo[i]) * t[i])
}

fn small_system() -> impl Strategy<Value = ContinuousLti> {
    (1usize..4, 1usize..3).prop_flat_map(|(n, m)| {
        (prop::collection::vec(-2.0..2.0f64, n * n), prop::collection::vec(-1.0..1.0f64, n * m))
            .prop_map(move |(a, b)| ContinuousLti::new(DMatrix::from_row_slice(n, n, &a), DMatrix::from_row_slice(n, m, &b)).unwrap())
    })
}

fn polytope(n: usize) -> impl Strategy<Value = Polytope> {
    (1usize..6, prop::collection::vec(-1.0..1.0f64, 6 * n), prop::collection::vec(0.1..2.0f64, 6)).prop_map(move |(k, g, h)| {
        let bx = Polytope::from_box(&vec![-1.5; n], &vec![1.5; n]).unwrap();
        let gm = DMatrix::from_row_slice(k, n, &g[..k * n]);
        bx.with_rows(&gm, &DVector::from_row_slice(&h[..k])).unwrap()
    })
}

fn record() -> impl Strategy<Value = ActivationRecord> {
    (any::<bool>(), -10.0..10.0f64, prop::collection::vec(-1.0..1.0f64, 4)).prop_map(|(act, v, x)| ActivationRecord {
        instants: if act { vec![0.0] } else { vec![] },
        v_at_activation: v,
        x_at_activation: x,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn zoh_semigroup(sys in small_system(), dt in 0.001..0.2f64) {
        let one = zoh_discretize(&sys, dt).unwrap();
        let two = zoh_discretize(&sys, 2.0 * dt).unwrap();
        let sq = &one.ad * &one.ad;
        prop_assert!((two.ad - sq).amax() <= 1e-10);
        prop_assert!((two.bd - (&one.ad * &one.bd + &one.bd)).amax() <= 1e-10);
    }

    #[test]
    fn zoh_matches_rk4_on_the_aircraft(t in prop::collection::vec(0.0..1.0f64, 6)) {
        let (plant, xs, us) = aircraft();
        let d = zoh_discretize(&plant, 0.01).unwrap();
        let x = in_box(&xs, &t[..4]);
        let u = in_box(&us, &t[4..]);
        let rk = integrate_plant(&plant, &x, &u, |_| DVector::zeros(4), 0.01, 4);
        prop_assert!((rk - d.step(&x, &u)).amax() <= 1e-8);
    }

    #[test]
    fn support_in_opposite_directions(p in polytope(3), d in prop::collection::vec(-1.0..1.0f64, 3)) {
        let d = DVector::from_vec(d);
        prop_assume!(d.norm() > 1e-3);
        prop_assert!(p.support(&d).unwrap() + p.support(&(-&d)).unwrap() >= -1e-9);
    }

    #[test]
    fn redundancy_removal_keeps_membership(p in polytope(2), pts in prop::collection::vec(-1.6..1.6f64, 100)) {
        let r = p.remove_redundancy().unwrap();
        for c in pts.chunks(2) {
            let x = DVector::from_row_slice(c);
            // points within the membership tolerance of a facet may go either way
            if p.max_violation(&x).abs() > 1e-7 {
                prop_assert_eq!(p.contains(&x), r.contains(&x));
            }
        }
    }

    #[test]
    fn solved_means_small_residuals(seed in 0u64..10_000, n in 1usize..8) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let hc = m.transpose() * &m;
        let g = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let p = QpProblem::new(hc, g, DMatrix::identity(n, n), DVector::from_element(n, -1.0), DVector::from_element(n, 1.0)).unwrap();
        let s = QpSettings::default();
        let sol = solve_qp(&p, s);
        if sol.status == QpStatus::Solved {
            let r = kkt_residuals(&p, &sol.z, &sol.y);
            prop_assert!(r.primal <= 1e-6 && r.dual <= 1e-6);
        }
    }

    #[test]
    fn robust_permission_without_disturbance_is_nominal(rec in record(), v in -10.0..10.0f64, sigma in 1e-4..1.0f64) {
        let p = SupervisorParams { sigma_w: sigma, c_gamma: 1e4 };
        prop_assert_eq!(permission_robust(v, &rec, &p, &DVector::zeros(4)), permission_nominal(v, &rec, &p));
    }

    #[test]
    fn decide_respects_permissions(
        vs in prop::collection::vec(-5.0..5.0f64, 3),
        objs in prop::collection::vec(0.0..10.0f64, 3),
        recs in prop::collection::vec(record(), 3),
        active in prop::option::of(0usize..3),
        robust in any::<bool>(),
    ) {
        let mode = if robust { Mode::Robust } else { Mode::Nominal };
        let params = SupervisorParams::defaults(mode);
        // reachable states only: fresh, or an incumbent plus closed earlier intervals
        let mut st = SwitchState::new(&[0, 1, 2]);
        if let Some(a) = active {
            for (i, mut r) in recs.into_iter().enumerate() {
                if r.ever_activated() {
                    r.instants.push(0.2);
                }
                st.records.insert(i, r);
            }
            update_records(&mut st, a, vs[a], &DVector::zeros(4), 0.5);
        }
        let cands: Vec<Candidate> = (0..3).map(|i| Candidate { id: i, v: vs[i], objective: objs[i] }).collect();
        let nu = DVector::from_element(4, 1e-3);
        let d = decide(&cands, &st, mode, &params, &nu);
        let idx = d.chosen;
        prop_assert!(d.permissions[idx] || Some(idx) == st.active);
        if let Some(a) = st.active {
            // never leaves the incumbent for a worse or equal objective
            if idx != a {
                prop_assert!(objs[idx] < objs[a]);
            }
        }
    }

    #[test]
    fn objective_ignores_pitch_rate_sign(cols in prop::collection::vec(-0.2..0.2f64, 4 * 12), dz in -5.0..5.0f64) {
        let traj = DMatrix::from_column_slice(4, 12, &cols);
        let mut flipped = traj.clone();
        flipped.row_mut(1).neg_mut();
        let ep = EnergyParams::default();
        prop_assert_eq!(super_objective(&traj, dz, &ep), super_objective(&flipped, dz, &ep));
    }
}

#[test]
fn robust_equals_nominal_on_ten_thousand_inputs() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let p = SupervisorParams::defaults(Mode::Robust);
    for _ in 0..10_000 {
        let rec = ActivationRecord {
            instants: if rng.random_bool(0.9) { vec![0.0] } else { vec![] },
            v_at_activation: rng.random_range(0.0..10.0),
            x_at_activation: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let v = rng.random_range(0.0..10.0);
        assert_eq!(permission_robust(v, &rec, &p, &DVector::zeros(4)), permission_nominal(v, &rec, &p));
    }
}

#[test]
fn scenario_round_trip() {
    let f = ScenarioFile::load(&common::scenario_path("aircraft_nominal.toml")).unwrap();
    let again = ScenarioFile::parse(&f.to_toml()).unwrap();
    assert_eq!(f, again);
    assert_eq!(f.content_hash(), again.content_hash());
    let mut g = f.clone();
    g.set_seed(7);
    assert_ne!(f.content_hash(), g.content_hash());
}
