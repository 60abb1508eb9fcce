//! Switching supervisor: activation records, Lyapunov-decrease
//! permissions, and the energy objective used to rank controllers.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Nominal,
    Robust,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Nominal => "nominal",
            Mode::Robust => "robust",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "nominal" => Ok(Mode::Nominal),
            "robust" => Ok(Mode::Robust),
            _ => Err(format!("unknown mode '{s}' (expected nominal|robust)")),
        }
    }
}

/// `W(x) = sigma_w ‖x‖²`, `γ(s) = c_gamma s²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupervisorParams {
    pub sigma_w: f64,
    pub c_gamma: f64,
}

impl SupervisorParams {
    pub fn defaults(mode: Mode) -> Self {
        match mode {
            Mode::Nominal => Self { sigma_w: 1e-1, c_gamma: 1e4 },
            Mode::Robust => Self { sigma_w: 1e-3, c_gamma: 1e4 },
        }
    }

    pub fn w(&self, x: &DVector<f64>) -> f64 {
        self.sigma_w * x.norm_squared()
    }

    pub fn gamma(&self, nu: &DVector<f64>) -> f64 {
        self.c_gamma * nu.norm_squared()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyParams {
    pub mass_kg: f64,
    pub gravity_mps2: f64,
    pub v_trim_mps: f64,
    pub dt_mpc_s: f64,
}

impl Default for EnergyParams {
    fn default() -> Self {
        Self { mass_kg: 1000.0, gravity_mps2: 9.81, v_trim_mps: 50.0, dt_mpc_s: 0.05 }
    }
}

impl EnergyParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.mass_kg > 0.0 && self.gravity_mps2 > 0.0 && self.dt_mpc_s > 0.0 && self.v_trim_mps.is_finite()) {
            return Err("energy parameters need mass > 0, gravity > 0, dt_mpc > 0".into());
        }
        Ok(())
    }

    /// `(KE, PE)` deviation for state `(α, q, V, θ)` at altitude deviation `dz`.
    pub fn energies(&self, x: &[f64], dz: f64) -> (f64, f64) {
        (0.5 * self.mass_kg * x[2] * x[2], self.mass_kg * self.gravity_mps2 * dz)
    }

    pub fn climb_rate(&self, x: &[f64]) -> f64 {
        (x[3] - x[0]).sin() * (self.v_trim_mps + x[2])
    }
}

/// Running energy objective over a trajectory sampled every `dt`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EnergyAccumulator {
    pub dz: f64,
    pub total: f64,
}

impl EnergyAccumulator {
    pub fn starting_at(dz: f64) -> Self {
        Self { dz, total: 0.0 }
    }

    /// Adds the term at `x` and the current altitude, returns `ΔE`, then
    /// advances the altitude by `dt`.
    pub fn push(&mut self, ep: &EnergyParams, x: &[f64], dt: f64) -> f64 {
        let (ke, pe) = ep.energies(x, self.dz);
        let de = ke.hypot(pe);
        self.total += de;
        self.dz += ep.climb_rate(x) * dt;
        de
    }
}

/// Energy objective of a predicted trajectory (`n × (N+1)`, columns are stages).
pub fn super_objective(traj: &DMatrix<f64>, dz0: f64, ep: &EnergyParams) -> f64 {
    let mut acc = EnergyAccumulator::starting_at(dz0);
    for j in 0..traj.ncols() {
        let c = traj.column(j);
        acc.push(ep, c.as_slice(), ep.dt_mpc_s);
    }
    acc.total
}

/// `Ξ_i`: switching instants of one controller. Even positions are
/// activations, odd positions deactivations.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub instants: Vec<f64>,
    pub v_at_activation: f64,
    pub x_at_activation: Vec<f64>,
}

impl ActivationRecord {
    pub fn ever_activated(&self) -> bool {
        !self.instants.is_empty()
    }

    pub fn last_activation_time(&self) -> Option<f64> {
        let n = self.instants.len();
        if n == 0 {
            None
        } else {
            Some(self.instants[(n - 1) & !1])
        }
    }

    pub fn is_active(&self) -> bool {
        self.instants.len() % 2 == 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchEvent {
    pub t: f64,
    pub from: Option<usize>,
    pub to: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SwitchState {
    pub active: Option<usize>,
    pub records: BTreeMap<usize, ActivationRecord>,
    pub history: Vec<SwitchEvent>,
}

impl SwitchState {
    pub fn new(ids: &[usize]) -> Self {
        Self {
            active: None,
            records: ids.iter().map(|&i| (i, ActivationRecord::default())).collect(),
            history: Vec::new(),
        }
    }

    pub fn record(&self, id: usize) -> &ActivationRecord {
        &self.records[&id]
    }
}

pub fn permission_nominal(v_now: f64, rec: &ActivationRecord, params: &SupervisorParams) -> bool {
    if !rec.ever_activated() {
        return true;
    }
    let x = DVector::from_column_slice(&rec.x_at_activation);
    v_now - rec.v_at_activation <= -params.w(&x)
}

pub fn permission_robust(v_now: f64, rec: &ActivationRecord, params: &SupervisorParams, nu_now: &DVector<f64>) -> bool {
    if !rec.ever_activated() {
        return true;
    }
    let x = DVector::from_column_slice(&rec.x_at_activation);
    v_now - rec.v_at_activation <= -params.w(&x) + params.gamma(nu_now)
}

pub fn permission(
    mode: Mode,
    v_now: f64,
    rec: &ActivationRecord,
    params: &SupervisorParams,
    nu_now: &DVector<f64>,
) -> bool {
    match mode {
        Mode::Nominal => permission_nominal(v_now, rec, params),
        Mode::Robust => permission_robust(v_now, rec, params, nu_now),
    }
}

/// What the supervisor sees from one controller at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub id: usize,
    pub v: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecisionReason {
    Stay,
    SwitchedBetterObjective,
    NoPermission,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwitchDecision {
    pub chosen: usize,
    pub permissions: Vec<bool>,
    pub objectives: Vec<f64>,
    pub reason: DecisionReason,
}

/// Candidates are the incumbent plus every permitted controller; the
/// lowest objective wins and ties keep the incumbent.
pub fn decide(
    cands: &[Candidate],
    st: &SwitchState,
    mode: Mode,
    params: &SupervisorParams,
    nu_now: &DVector<f64>,
) -> SwitchDecision {
    assert!(!cands.is_empty(), "decide needs at least one candidate");
    let permissions: Vec<bool> = cands
        .iter()
        .map(|c| st.active == Some(c.id) || permission(mode, c.v, st.record(c.id), params, nu_now))
        .collect();
    let objectives: Vec<f64> = cands.iter().map(|c| c.objective).collect();
    let mut best: Option<usize> = cands.iter().position(|c| Some(c.id) == st.active);
    for (k, c) in cands.iter().enumerate() {
        if !permissions[k] {
            continue;
        }
        match best {
            None => best = Some(k),
            Some(b) if c.objective < cands[b].objective => best = Some(k),
            _ => {}
        }
    }
    let best = best.expect("first activation is always permitted");
    let overall = cands
        .iter()
        .enumerate()
        .fold(None::<usize>, |acc, (k, c)| match acc {
            Some(a) if cands[a].objective <= c.objective => Some(a),
            _ => Some(k),
        })
        .unwrap();
    let chosen = cands[best].id;
    let reason = if Some(chosen) != st.active {
        DecisionReason::SwitchedBetterObjective
    } else if cands[overall].objective < cands[best].objective && !permissions[overall] {
        DecisionReason::NoPermission
    } else {
        DecisionReason::Stay
    };
    SwitchDecision { chosen, permissions, objectives, reason }
}

/// Applies a decision: on a switch, closes the old activation interval and
/// opens a new one storing `V` and `x` of the incoming controller.
pub fn update_records(st: &mut SwitchState, chosen: usize, v_chosen: f64, x_chosen: &DVector<f64>, t: f64) {
    if st.active == Some(chosen) {
        return;
    }
    if let Some(old) = st.active {
        st.records.get_mut(&old).expect("unknown controller").instants.push(t);
    }
    let rec = st.records.get_mut(&chosen).expect("unknown controller");
    rec.instants.push(t);
    rec.v_at_activation = v_chosen;
    rec.x_at_activation = x_chosen.as_slice().to_vec();
    st.history.push(SwitchEvent { t, from: st.active, to: chosen });
    st.active = Some(chosen);
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rec(v: f64, x: &[f64]) -> ActivationRecord {
        ActivationRecord { instants: vec![0.0], v_at_activation: v, x_at_activation: x.to_vec() }
    }

    #[test]
    fn nominal_permission_arithmetic() {
        let p = SupervisorParams { sigma_w: 1.0, c_gamma: 1e4 };
        assert!(permission_nominal(123.0, &ActivationRecord::default(), &p));
        let r = rec(10.0, &[1.0, 0.0]);
        assert!(permission_nominal(8.9, &r, &p));
        assert!(!permission_nominal(9.5, &r, &p));
    }

    #[test]
    fn robust_permission_arithmetic() {
        let p = SupervisorParams { sigma_w: 1.0, c_gamma: 0.7 };
        let r = rec(10.0, &[1.0]);
        assert!(permission_robust(9.5, &r, &p, &DVector::from_element(1, 1.0)));
        let p = SupervisorParams { sigma_w: 1.0, c_gamma: 0.2 };
        assert!(!permission_robust(10.5, &r, &p, &DVector::from_element(1, 1.0)));
    }

    #[test]
    fn energy_examples() {
        let ep = EnergyParams::default();
        assert_eq!(super_objective(&DMatrix::zeros(4, 11), 0.0, &ep), 0.0);
        let mut t = DMatrix::zeros(4, 11);
        for j in 0..11 {
            t[(2, j)] = 3.0;
            t[(0, j)] = 0.1;
            t[(3, j)] = 0.1;
        }
        assert_relative_eq!(super_objective(&t, 0.0, &ep), 11.0 * 500.0 * 9.0, max_relative = 1e-14);
        let mut climb = DMatrix::zeros(4, 2);
        climb[(3, 0)] = std::f64::consts::FRAC_PI_2;
        let expect = ep.mass_kg * ep.gravity_mps2 * ep.v_trim_mps * ep.dt_mpc_s;
        assert_relative_eq!(super_objective(&climb, 0.0, &ep), expect, max_relative = 1e-12);
    }

    fn cand(id: usize, v: f64, objective: f64) -> Candidate {
        Candidate { id, v, objective }
    }

    #[test]
    fn ties_keep_incumbent() {
        let p = SupervisorParams::defaults(Mode::Nominal);
        let mut st = SwitchState::new(&[0, 1, 2]);
        update_records(&mut st, 1, 5.0, &DVector::zeros(2), 0.0);
        let d = decide(&[cand(0, 1.0, 7.0), cand(1, 1.0, 7.0), cand(2, 1.0, 7.0)], &st, Mode::Nominal, &p, &DVector::zeros(2));
        assert_eq!(d.chosen, 1);
        assert_eq!(d.reason, DecisionReason::Stay);
    }

    #[test]
    fn switches_to_permitted_better() {
        let p = SupervisorParams::defaults(Mode::Nominal);
        let mut st = SwitchState::new(&[1, 2]);
        update_records(&mut st, 1, 5.0, &DVector::zeros(2), 0.0);
        let d = decide(&[cand(1, 4.0, 9.0), cand(2, 3.0, 2.0)], &st, Mode::Nominal, &p, &DVector::zeros(2));
        assert_eq!((d.chosen, d.reason), (2, DecisionReason::SwitchedBetterObjective));
    }

    #[test]
    fn blocked_switch_stays() {
        let p = SupervisorParams { sigma_w: 1.0, c_gamma: 0.0 };
        let mut st = SwitchState::new(&[1, 2]);
        update_records(&mut st, 2, 10.0, &DVector::from_element(1, 1.0), 0.0);
        update_records(&mut st, 1, 5.0, &DVector::zeros(1), 1.0);
        let d = decide(&[cand(1, 4.0, 9.0), cand(2, 9.5, 2.0)], &st, Mode::Nominal, &p, &DVector::zeros(1));
        assert_eq!((d.chosen, d.reason), (1, DecisionReason::NoPermission));
        assert_eq!(d.permissions, vec![true, false]);
    }

    #[test]
    fn first_decision_takes_global_minimum() {
        let p = SupervisorParams::defaults(Mode::Robust);
        let st = SwitchState::new(&[0, 1, 2]);
        let d = decide(&[cand(0, 1.0, 3.0), cand(1, 1.0, 1.0), cand(2, 1.0, 2.0)], &st, Mode::Robust, &p, &DVector::zeros(2));
        assert_eq!(d.chosen, 1);
    }

    #[test]
    fn scripted_records() {
        let mut st = SwitchState::new(&[0, 1]);
        let x = |v: f64| DVector::from_element(2, v);
        update_records(&mut st, 0, 4.0, &x(1.0), 0.0);
        update_records(&mut st, 0, 3.0, &x(0.5), 0.1);
        update_records(&mut st, 1, 2.0, &x(0.4), 0.2);
        update_records(&mut st, 0, 1.0, &x(0.3), 0.3);
        let r0 = st.record(0);
        assert_eq!(r0.instants, vec![0.0, 0.2, 0.3]);
        assert_eq!((r0.v_at_activation, r0.x_at_activation.clone()), (1.0, vec![0.3, 0.3]));
        assert_eq!(r0.last_activation_time(), Some(0.3));
        assert!(r0.is_active());
        let r1 = st.record(1);
        assert_eq!(r1.instants, vec![0.2, 0.3]);
        assert_eq!(r1.last_activation_time(), Some(0.2));
        assert!(!r1.is_active());
        assert_eq!(st.history.len(), 3);
        assert_eq!(st.history[0], SwitchEvent { t: 0.0, from: None, to: 0 });
    }
}
