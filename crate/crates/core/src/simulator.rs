//! Closed-loop sampled-data simulation of the switched MPC scheme.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lti::{integrate_plant, zoh_discretize, ContinuousLti, DiscreteModel, Translator};
use crate::ocp::{build_composed, build_nominal, build_robust, solve, MpcConfig, OcpError, OcpQp, OcpSolution};
use crate::polytope::Polytope;
use crate::qp::{QpSettings, QpSolver, QpStatus, WarmStart};
use crate::supervisor::{
    decide, permission, super_objective, update_records, Candidate, EnergyAccumulator, EnergyParams, Mode,
    SupervisorParams, SwitchState,
};
use crate::terminal::{enforce_assumption5, synthesize_kit, CertReport, TerminalError, TerminalSettings};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Lemma2(OcpError),
    #[error("step {step}: {source}")]
    Solver { step: usize, source: OcpError },
    #[error("terminal synthesis failed: {0}")]
    Terminal(#[from] TerminalError),
}

impl SimError {
    pub fn is_lemma2(&self) -> bool {
        matches!(self, SimError::Lemma2(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerSpec {
    pub id: usize,
    pub name: String,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Selection {
    /// Supervisor picks among `members` every step.
    Psmpc { members: Vec<usize> },
    Single(usize),
    /// Uniformly random member every step; permissions and objectives are
    /// computed and logged but ignored.
    RandomEveryStep { members: Vec<usize>, seed: u64 },
}

impl Selection {
    pub fn members(&self) -> Vec<usize> {
        match self {
            Selection::Psmpc { members } | Selection::RandomEveryStep { members, .. } => members.clone(),
            Selection::Single(id) => vec![*id],
        }
    }

    pub fn label(&self) -> String {
        match self {
            Selection::Psmpc { .. } => "pSMPC".into(),
            Selection::Single(id) => format!("single:{id}"),
            Selection::RandomEveryStep { seed, .. } => format!("random:{seed}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Disturbance {
    None,
    /// Gaussian noise on one input channel (radians), sampled once per
    /// simulation step and held.
    GaussianInput { channel: usize, mean: f64, std: f64, seed: u64, apply_in_nominal: bool },
}

#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub plant: ContinuousLti<f64>,
    pub controllers: Vec<ControllerSpec>,
    pub x_set: Polytope<f64>,
    pub u_set: Polytope<f64>,
    pub mode: Mode,
    pub selection: Selection,
    pub dt_sim: f64,
    pub dt_mpc: f64,
    pub horizon: usize,
    pub t_final: f64,
    pub x0: DVector<f64>,
    pub disturbance: Disturbance,
    pub energy: EnergyParams,
    pub supervisor: SupervisorParams,
    pub terminal: TerminalSettings,
}

impl ScenarioConfig {
    /// Number of simulation steps; the log has one more row.
    pub fn steps(&self) -> usize {
        (self.t_final / self.dt_sim).round() as usize
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |s: String| Err(SimError::Config(s));
        self.plant.validate().map_err(|e| SimError::Config(e.to_string()))?;
        let (n, m) = (self.plant.n(), self.plant.m());
        if !(self.dt_sim > 0.0 && self.dt_mpc > 0.0 && self.t_final > 0.0) {
            return bad("dt_sim, dt_mpc and t_final must be positive".into());
        }
        let ratio = self.dt_mpc / self.dt_sim;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio || ratio.round() < 1.0 {
            return bad(format!("dt_mpc ({}) must be an integer multiple of dt_sim ({})", self.dt_mpc, self.dt_sim));
        }
        let steps = self.t_final / self.dt_sim;
        if (steps - steps.round()).abs() > 1e-9 * steps {
            return bad("t_final must be a multiple of dt_sim".into());
        }
        if self.x0.len() != n || self.x_set.dim() != n || self.u_set.dim() != m {
            return bad("x0 and constraint sets must match the plant dimensions".into());
        }
        if self.controllers.is_empty() {
            return bad("at least one controller is required".into());
        }
        for (k, c) in self.controllers.iter().enumerate() {
            if self.controllers[..k].iter().any(|o| o.id == c.id) {
                return bad(format!("duplicate controller id {}", c.id));
            }
        }
        let members = self.selection.members();
        if members.is_empty() {
            return bad("controller selection is empty".into());
        }
        for (k, id) in members.iter().enumerate() {
            if !self.controllers.iter().any(|c| c.id == *id) {
                return bad(format!("selection refers to unknown controller {id}"));
            }
            if members[..k].contains(id) {
                return bad(format!("controller {id} selected twice"));
            }
        }
        if let Disturbance::GaussianInput { channel, std, mean, .. } = self.disturbance {
            if channel >= m || !(std >= 0.0) || !mean.is_finite() {
                return bad("disturbance needs a valid input channel, finite mean and std ≥ 0".into());
            }
        }
        if !(self.supervisor.sigma_w > 0.0 && self.supervisor.c_gamma >= 0.0) {
            return bad("supervisor needs sigma_W > 0 and c_gamma ≥ 0".into());
        }
        if self.horizon < 2 {
            return bad("horizon must be at least 2".into());
        }
        self.energy.validate().map_err(SimError::Config)?;
        if self.energy.dt_mpc_s != self.dt_mpc {
            return bad("energy dt_mpc must equal the scenario dt_mpc".into());
        }
        if n < 4 {
            return bad("the energy objective needs states (alpha, q, V, theta)".into());
        }
        Ok(())
    }

    fn disturbance_active(&self) -> bool {
        match self.disturbance {
            Disturbance::None => false,
            Disturbance::GaussianInput { apply_in_nominal, .. } => self.mode == Mode::Robust || apply_in_nominal,
        }
    }
}

/// Synthesized controllers of a scenario.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub configs: Vec<MpcConfig<f64>>,
    pub report: CertReport,
    pub model: DiscreteModel<f64>,
}

impl Prepared {
    pub fn index_of(&self, id: usize) -> usize {
        self.configs.iter().position(|c| c.id == id).expect("unknown controller id")
    }
}

/// Discretizes the plant at `dt_mpc`, synthesizes every controller's
/// terminal ingredients and enforces cross-invariance across all of them.
pub fn prepare(sc: &ScenarioConfig) -> Result<Prepared, SimError> {
    sc.validate()?;
    let model = zoh_discretize(&sc.plant, sc.dt_mpc).map_err(|e| SimError::Config(e.to_string()))?;
    let mut kits = Vec::new();
    for c in &sc.controllers {
        kits.push(synthesize_kit(&model, &c.q, &c.r, &sc.x_set, &sc.u_set, &sc.terminal)?);
    }
    let nc = sc.controllers.len();
    let models = vec![model.clone(); nc];
    let xs = vec![sc.x_set.clone(); nc];
    let us = vec![sc.u_set.clone(); nc];
    let report = enforce_assumption5(&mut kits, &models, &xs, &us, &sc.terminal)?;
    let configs = sc
        .controllers
        .iter()
        .zip(kits)
        .map(|(c, kit)| MpcConfig {
            id: c.id,
            name: c.name.clone(),
            model: model.clone(),
            q: c.q.clone(),
            r: c.r.clone(),
            kit,
            horizon: sc.horizon,
            x_set: sc.x_set.clone(),
            u_set: sc.u_set.clone(),
            lambda: c.lambda,
            translator: Translator::identity(sc.plant.n()),
        })
        .collect::<Vec<_>>();
    for c in &configs {
        c.validate(sc.mode == Mode::Robust).map_err(|e| SimError::Config(e.to_string()))?;
    }
    if sc.mode == Mode::Robust {
        let rho = crate::linalg::spectral_radius(&zoh_discretize(&sc.plant, sc.dt_sim).unwrap().ad);
        if rho >= 1.0 {
            log::warn!("plant is not open-loop stable (spectral radius {rho:.6}); robust guarantees need it");
        }
    }
    Ok(Prepared { configs, report, model })
}

/// One row of the closed-loop log, taken at `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRow {
    pub t: f64,
    pub xi: Vec<f64>,
    pub mu: Vec<f64>,
    /// Input-channel noise sample held over the following step.
    pub w: f64,
    /// Disturbance used by the supervisor: `B_w w` plus the folded
    /// prediction mismatch (robust mode).
    pub nu: Vec<f64>,
    pub sigma: usize,
    pub v: Vec<f64>,
    pub permission: Vec<bool>,
    pub objective: Vec<f64>,
    pub de: f64,
    pub dz: f64,
    pub iters: Vec<usize>,
    pub solved: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMeta {
    pub selection: String,
    pub mode: Mode,
    pub member_ids: Vec<usize>,
    pub member_names: Vec<String>,
    pub state_labels: Vec<String>,
    pub input_labels: Vec<String>,
    pub seed: Option<u64>,
    pub rows: usize,
    pub switches: usize,
    pub energy_total_j: f64,
    pub wall_time_s: f64,
    pub mean_solve_ms: f64,
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SimLog {
    pub rows: Vec<StepRow>,
    pub meta: SimMeta,
}

/// What an observer sees after the decision of step `k`.
pub struct StepView<'a> {
    pub step: usize,
    pub t: f64,
    pub xi: &'a DVector<f64>,
    pub chosen: usize,
    /// Parallel to `members`.
    pub members: &'a [usize],
    pub solutions: &'a [OcpSolution<f64>],
    pub problems: &'a [&'a OcpQp<f64>],
}

struct Worker {
    cfg: usize,
    restrictors: Vec<usize>,
    ocp: Option<OcpQp<f64>>,
    solver: QpSolver<f64>,
    warm: Option<WarmStart<f64>>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Problem {
    Nominal,
    Composed,
    Robust,
}

impl Worker {
    fn step(&mut self, configs: &[MpcConfig<f64>], x: &DVector<f64>, kind: Problem) -> Result<OcpSolution<f64>, OcpError> {
        let cfg = &configs[self.cfg];
        match &mut self.ocp {
            Some(o) => o.set_initial_state(cfg, x),
            None => {
                let rs: Vec<&MpcConfig<f64>> = self.restrictors.iter().map(|&r| &configs[r]).collect();
                self.ocp = Some(match kind {
                    Problem::Nominal => build_nominal(cfg, x)?,
                    Problem::Composed => build_composed(cfg, &rs, x)?,
                    Problem::Robust => build_robust(cfg, x)?,
                });
            }
        }
        let ocp = self.ocp.as_ref().unwrap();
        let sol = solve(cfg, ocp, &mut self.solver, self.warm.as_ref());
        self.warm = sol.as_ref().ok().map(|s| s.warm_start());
        sol
    }
}

pub fn run_closed_loop(sc: &ScenarioConfig, prep: &Prepared) -> Result<SimLog, SimError> {
    run_closed_loop_with(sc, prep, |_| {})
}

/// Runs the loop and calls `observe` after every supervisor decision.
pub fn run_closed_loop_with<F>(sc: &ScenarioConfig, prep: &Prepared, mut observe: F) -> Result<SimLog, SimError>
where
    F: FnMut(&StepView<'_>),
{
    sc.validate()?;
    let started = Instant::now();
    let members = sc.selection.members();
    let idx: Vec<usize> = members.iter().map(|&id| prep.index_of(id)).collect();
    let kind = match (sc.mode, &sc.selection) {
        (Mode::Robust, _) => Problem::Robust,
        (Mode::Nominal, Selection::Single(_)) => Problem::Nominal,
        (Mode::Nominal, _) if members.len() == 1 => Problem::Nominal,
        (Mode::Nominal, _) => Problem::Composed,
    };
    let settings = QpSettings::<f64>::default();
    let mut workers: Vec<Worker> = idx
        .iter()
        .map(|&i| Worker {
            cfg: i,
            restrictors: if kind == Problem::Composed { idx.iter().copied().filter(|&j| j != i).collect() } else { vec![] },
            ocp: None,
            solver: QpSolver::new(settings),
            warm: None,
        })
        .collect();

    let plant_sim = zoh_discretize(&sc.plant, sc.dt_sim).map_err(|e| SimError::Config(e.to_string()))?;
    let n = sc.plant.n();
    let disturbed = sc.disturbance_active();
    let (mut noise_rng, noise) = match sc.disturbance {
        Disturbance::GaussianInput { mean, std, seed, .. } if disturbed => (
            Some(ChaCha8Rng::seed_from_u64(seed)),
            Some(Normal::new(mean, std).map_err(|e| SimError::Config(e.to_string()))?),
        ),
        _ => (None, None),
    };
    let channel = match sc.disturbance {
        Disturbance::GaussianInput { channel, .. } => channel,
        Disturbance::None => 0,
    };
    let b_w = sc.plant.b.column(channel).into_owned();
    let mut pick_rng = match &sc.selection {
        Selection::RandomEveryStep { seed, .. } => Some(ChaCha8Rng::seed_from_u64(*seed)),
        _ => None,
    };

    let mut st = SwitchState::new(&members);
    let mut xi = sc.x0.clone();
    let mut energy = EnergyAccumulator::default();
    let mut mismatch = DVector::<f64>::zeros(n);
    let mut rows = Vec::with_capacity(sc.steps() + 1);
    let mut solve_time = 0.0;

    for k in 0..=sc.steps() {
        let t = k as f64 * sc.dt_sim;
        let w = match (&mut noise_rng, &noise) {
            (Some(r), Some(d)) => d.sample(r),
            _ => 0.0,
        };
        let nu_applied = &b_w * w;
        let nu_now = if sc.mode == Mode::Robust { &nu_applied + &mismatch / sc.dt_sim } else { nu_applied.clone() };

        let xs: Vec<DVector<f64>> = idx
            .iter()
            .map(|&i| prep.configs[i].translator.translate(&xi))
            .collect::<Result<_, _>>()
            .map_err(|e| SimError::Config(e.to_string()))?;
        let t0 = Instant::now();
        let results: Vec<Result<OcpSolution<f64>, OcpError>> = workers
            .par_iter_mut()
            .zip(xs.par_iter())
            .map(|(wk, x)| wk.step(&prep.configs, x, kind))
            .collect();
        solve_time += t0.elapsed().as_secs_f64();
        let mut sols = Vec::with_capacity(results.len());
        for r in results {
            match r {
                Ok(s) => sols.push(s),
                Err(e @ OcpError::Lemma2Violation { .. }) => return Err(SimError::Lemma2(e)),
                Err(e) => return Err(SimError::Solver { step: k, source: e }),
            }
        }
        let cands: Vec<Candidate> = sols
            .iter()
            .map(|s| Candidate { id: s.id, v: s.v, objective: super_objective(&s.x_star, energy.dz, &sc.energy) })
            .collect();
        let decision = decide(&cands, &st, sc.mode, &sc.supervisor, &nu_now);
        let chosen = match (&sc.selection, &mut pick_rng) {
            (Selection::RandomEveryStep { .. }, Some(r)) => members[r.random_range(0..members.len())],
            (Selection::Single(id), _) => *id,
            _ => decision.chosen,
        };
        let ci = members.iter().position(|&m| m == chosen).unwrap();
        let permission_row: Vec<bool> = cands
            .iter()
            .map(|c| st.active == Some(c.id) || permission(sc.mode, c.v, st.record(c.id), &sc.supervisor, &nu_now))
            .collect();
        update_records(&mut st, chosen, sols[ci].v, &xs[ci], t);
        let problems: Vec<&OcpQp<f64>> = workers.iter().map(|w| w.ocp.as_ref().unwrap()).collect();
        observe(&StepView { step: k, t, xi: &xi, chosen, members: &members, solutions: &sols, problems: &problems });

        let mu = sols[ci].first_input();
        let de = energy.push(&sc.energy, xi.as_slice(), sc.dt_sim);
        rows.push(StepRow {
            t,
            xi: xi.as_slice().to_vec(),
            mu: mu.as_slice().to_vec(),
            w,
            nu: nu_now.as_slice().to_vec(),
            sigma: chosen,
            v: sols.iter().map(|s| s.v).collect(),
            permission: permission_row,
            objective: cands.iter().map(|c| c.objective).collect(),
            de,
            dz: energy.dz,
            iters: sols.iter().map(|s| s.stats.iters).collect(),
            solved: sols.iter().map(|s| s.status == QpStatus::Solved).collect(),
        });
        if k == sc.steps() {
            break;
        }
        let next = if disturbed && w != 0.0 {
            integrate_plant(&sc.plant, &xi, &mu, |_| nu_applied.clone(), sc.dt_sim, 4)
        } else {
            plant_sim.step(&xi, &mu)
        };
        if sc.mode == Mode::Robust {
            let xbar = &sols[ci].xbar;
            let pred = plant_sim.step(xbar, &mu);
            mismatch = &next - pred;
        }
        xi = next;
    }

    let switches = st.history.len().saturating_sub(1);
    let seed = match sc.disturbance {
        Disturbance::GaussianInput { seed, .. } if disturbed => Some(seed),
        _ => match sc.selection {
            Selection::RandomEveryStep { seed, .. } => Some(seed),
            _ => None,
        },
    };
    let nrows = rows.len();
    Ok(SimLog {
        rows,
        meta: SimMeta {
            selection: sc.selection.label(),
            mode: sc.mode,
            member_ids: members.clone(),
            member_names: idx.iter().map(|&i| prep.configs[i].name.clone()).collect(),
            state_labels: sc.plant.state_labels.iter().map(label_of).collect(),
            input_labels: sc.plant.input_labels.iter().map(label_of).collect(),
            seed,
            rows: nrows,
            switches,
            energy_total_j: energy.total,
            wall_time_s: started.elapsed().as_secs_f64(),
            mean_solve_ms: 1e3 * solve_time / nrows.max(1) as f64,
            config_hash: None,
        },
    })
}

fn label_of(l: &crate::lti::Label) -> String {
    if l.unit.is_empty() {
        l.name.clone()
    } else {
        format!("{}_{}", l.name, l.unit)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub energy_total_j: f64,
    pub max_state_violation: f64,
    pub max_input_violation: f64,
    pub switches: usize,
    pub mean_solve_ms: f64,
    pub final_state_norm: f64,
}

/// Recomputes the energy objective from the logged plant states.
pub fn evaluate_metrics(log: &SimLog, ep: &EnergyParams, dt_sim: f64, x_set: &Polytope<f64>, u_set: &Polytope<f64>) -> Metrics {
    let mut acc = EnergyAccumulator::default();
    let (mut xv, mut uv) = (0.0f64, 0.0f64);
    let mut switches = 0;
    for (k, r) in log.rows.iter().enumerate() {
        acc.push(ep, &r.xi, dt_sim);
        xv = xv.max(x_set.max_violation(&DVector::from_column_slice(&r.xi)));
        uv = uv.max(u_set.max_violation(&DVector::from_column_slice(&r.mu)));
        if k > 0 && r.sigma != log.rows[k - 1].sigma {
            switches += 1;
        }
    }
    Metrics {
        energy_total_j: acc.total,
        max_state_violation: xv,
        max_input_violation: uv,
        switches,
        mean_solve_ms: log.meta.mean_solve_ms,
        final_state_norm: log.rows.last().map(|r| DVector::from_column_slice(&r.xi).norm()).unwrap_or(0.0),
    }
}

/// Re-evaluates the permission condition at every logged activation of a
/// controller that had been active before. Returns `(row, id, holds)`.
pub fn replay_activations(log: &SimLog, mode: Mode, params: &SupervisorParams) -> Vec<(usize, usize, bool)> {
    let ids = &log.meta.member_ids;
    let mut last: Vec<Option<usize>> = vec![None; ids.len()];
    let mut out = Vec::new();
    for (k, r) in log.rows.iter().enumerate() {
        let prev = if k == 0 { None } else { Some(log.rows[k - 1].sigma) };
        if prev == Some(r.sigma) {
            continue;
        }
        let c = ids.iter().position(|&i| i == r.sigma).unwrap();
        if let Some(a) = last[c] {
            let act = &log.rows[a];
            let rec = crate::supervisor::ActivationRecord {
                instants: vec![act.t],
                v_at_activation: act.v[c],
                x_at_activation: act.xi.clone(),
            };
            let ok = permission(mode, r.v[c], &rec, params, &DVector::from_column_slice(&r.nu));
            out.push((k, r.sigma, ok));
        }
        last[c] = Some(k);
    }
    out
}

impl SimLog {
    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["t_s".to_string()];
        h.extend(self.meta.state_labels.iter().map(|l| format!("xi_{l}")));
        h.extend(self.meta.input_labels.iter().map(|l| format!("mu_{l}")));
        h.push("w_rad".into());
        h.extend((0..self.meta.state_labels.len()).map(|i| format!("nu_{i}")));
        h.push("sigma".into());
        for kind in ["V", "perm", "J", "iters", "solved"] {
            h.extend(self.meta.member_ids.iter().map(|id| format!("{kind}_{id}")));
        }
        h.push("dE_J".into());
        h.push("dz_m".into());
        h
    }

    /// CSV with a header line; floats use shortest round-trip formatting.
    pub fn to_csv(&self) -> String {
        let mut s = self.header().join(",");
        s.push('\n');
        for r in &self.rows {
            let mut f: Vec<String> = vec![r.t.to_string()];
            f.extend(r.xi.iter().map(|v| v.to_string()));
            f.extend(r.mu.iter().map(|v| v.to_string()));
            f.push(r.w.to_string());
            f.extend(r.nu.iter().map(|v| v.to_string()));
            f.push(r.sigma.to_string());
            f.extend(r.v.iter().map(|v| v.to_string()));
            f.extend(r.permission.iter().map(|&p| (p as u8).to_string()));
            f.extend(r.objective.iter().map(|v| v.to_string()));
            f.extend(r.iters.iter().map(|v| v.to_string()));
            f.extend(r.solved.iter().map(|&p| (p as u8).to_string()));
            f.push(r.de.to_string());
            f.push(r.dz.to_string());
            s.push_str(&f.join(","));
            s.push('\n');
        }
        s
    }
}
