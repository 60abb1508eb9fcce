//! TOML scenario files. Angles are stored in degrees wherever the unit
//! says so; everything is converted to SI/radians on resolution.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::lti::{ContinuousLti, Label};
use crate::polytope::Polytope;
use crate::simulator::{ControllerSpec, Disturbance, ScenarioConfig, Selection};
use crate::supervisor::{EnergyParams, Mode, SupervisorParams};
use crate::terminal::TerminalSettings;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {msg}")]
    Io { path: String, msg: String },
    #[error("cannot parse scenario: {0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Signal {
    pub name: String,
    /// Unit used in this file: `deg` and `deg/s` are converted to radians.
    pub unit: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    pub max: f64,
}

impl Signal {
    fn factor(&self) -> f64 {
        match self.unit.as_str() {
            "deg" | "deg/s" => PI / 180.0,
            _ => 1.0,
        }
    }

    fn si_unit(&self) -> String {
        match self.unit.as_str() {
            "deg" => "rad".into(),
            "deg/s" => "rad/s".into(),
            u => u.into(),
        }
    }

    fn bounds(&self) -> (f64, f64) {
        let f = self.factor();
        (self.min.unwrap_or(-self.max) * f, self.max * f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSection {
    #[serde(default)]
    pub description: String,
    pub states: Vec<Signal>,
    pub inputs: Vec<Signal>,
    /// SI units.
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingSection {
    pub dt_sim_s: f64,
    pub dt_mpc_s: f64,
    pub t_final_s: f64,
    pub horizon_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    pub id: usize,
    pub name: String,
    pub q_diag: Vec<f64>,
    pub r_diag: Vec<f64>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

fn default_lambda() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub mode: Mode,
    /// `pSMPC`, `single:<id>` or `random:<seed>`.
    pub controller: String,
    pub psmpc_members: Vec<usize>,
    /// Initial state in the file units of `plant.states`.
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum DisturbanceSection {
    None,
    GaussianInput {
        channel: String,
        mean_deg: f64,
        std_deg: f64,
        seed: u64,
        #[serde(default)]
        apply_in_nominal: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergySection {
    pub mass_kg: f64,
    pub gravity_mps2: f64,
    pub v_trim_mps: f64,
}

impl Default for EnergySection {
    fn default() -> Self {
        let e = EnergyParams::default();
        Self { mass_kg: e.mass_kg, gravity_mps2: e.gravity_mps2, v_trim_mps: e.v_trim_mps }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupervisorSection {
    pub sigma_w_nominal: f64,
    pub sigma_w_robust: f64,
    pub c_gamma: f64,
}

impl Default for SupervisorSection {
    fn default() -> Self {
        Self {
            sigma_w_nominal: SupervisorParams::defaults(Mode::Nominal).sigma_w,
            sigma_w_robust: SupervisorParams::defaults(Mode::Robust).sigma_w,
            c_gamma: SupervisorParams::defaults(Mode::Robust).c_gamma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    pub plant: PlantSection,
    pub timing: TimingSection,
    pub controllers: Vec<ControllerSection>,
    pub run: RunSection,
    pub disturbance: DisturbanceSection,
    #[serde(default)]
    pub energy: EnergySection,
    #[serde(default)]
    pub supervisor: SupervisorSection,
    #[serde(default)]
    pub terminal: TerminalSettings,
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, ScenarioError> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, |r| r.len());
    if nr == 0 || nc == 0 || rows.iter().any(|r| r.len() != nc) {
        return Err(ScenarioError::Invalid(format!("{what} must be a non-empty rectangular matrix")));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

fn diag(d: &[f64], n: usize, what: &str) -> Result<DMatrix<f64>, ScenarioError> {
    if d.len() != n {
        return Err(ScenarioError::Invalid(format!("{what} needs {n} entries, got {}", d.len())));
    }
    Ok(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
}

pub fn parse_selection(s: &str, members: &[usize]) -> Result<Selection, ScenarioError> {
    if s.eq_ignore_ascii_case("psmpc") {
        return Ok(Selection::Psmpc { members: members.to_vec() });
    }
    let num = |v: &str| v.trim().parse::<u64>().map_err(|_| ScenarioError::Invalid(format!("bad controller selection '{s}'")));
    if let Some(id) = s.strip_prefix("single:") {
        return Ok(Selection::Single(num(id)? as usize));
    }
    if let Some(seed) = s.strip_prefix("random:") {
        return Ok(Selection::RandomEveryStep { members: members.to_vec(), seed: num(seed)? });
    }
    Err(ScenarioError::Invalid(format!("controller selection '{s}' is not pSMPC, single:<id> or random:<seed>")))
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::Io { path: path.display().to_string(), msg: e.to_string() })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    /// sha256 over the canonical serialization, which carries every input
    /// that affects results.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn set_seed(&mut self, seed: u64) {
        if let DisturbanceSection::GaussianInput { seed: s, .. } = &mut self.disturbance {
            *s = seed;
        }
        if self.run.controller.starts_with("random:") {
            self.run.controller = format!("random:{seed}");
        }
    }

    pub fn resolve(&self) -> Result<ScenarioConfig, ScenarioError> {
        let p = &self.plant;
        let a = matrix(&p.a, "plant.a")?;
        let b = matrix(&p.b, "plant.b")?;
        let (n, m) = (p.states.len(), p.inputs.len());
        if a.shape() != (n, n) || b.shape() != (n, m) {
            return Err(ScenarioError::Invalid(format!(
                "plant matrices must be {n}x{n} and {n}x{m} to match the declared signals"
            )));
        }
        let labels = |s: &[Signal]| s.iter().map(|x| Label::new(x.name.clone(), x.si_unit())).collect();
        let plant = ContinuousLti::new(a, b)
            .and_then(|s| s.with_labels(labels(&p.states), labels(&p.inputs)))
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        let boxed = |s: &[Signal]| -> Result<Polytope<f64>, ScenarioError> {
            let (lo, hi): (Vec<f64>, Vec<f64>) = s.iter().map(Signal::bounds).unzip();
            Polytope::from_box(&lo, &hi).map_err(|e| ScenarioError::Invalid(e.to_string()))
        };
        let x_set = boxed(&p.states)?;
        let u_set = boxed(&p.inputs)?;
        if self.run.x0.len() != n {
            return Err(ScenarioError::Invalid(format!("run.x0 needs {n} entries")));
        }
        let x0 = DVector::from_iterator(n, self.run.x0.iter().zip(&p.states).map(|(v, s)| v * s.factor()));
        let mut controllers = Vec::new();
        for c in &self.controllers {
            controllers.push(ControllerSpec {
                id: c.id,
                name: c.name.clone(),
                q: diag(&c.q_diag, n, &format!("controller {} q_diag", c.id))?,
                r: diag(&c.r_diag, m, &format!("controller {} r_diag", c.id))?,
                lambda: c.lambda,
            });
        }
        let disturbance = match &self.disturbance {
            DisturbanceSection::None => Disturbance::None,
            DisturbanceSection::GaussianInput { channel, mean_deg, std_deg, seed, apply_in_nominal } => {
                let ch = p
                    .inputs
                    .iter()
                    .position(|s| &s.name == channel)
                    .ok_or_else(|| ScenarioError::Invalid(format!("disturbance channel '{channel}' is not an input")))?;
                Disturbance::GaussianInput {
                    channel: ch,
                    mean: mean_deg.to_radians(),
                    std: std_deg.to_radians(),
                    seed: *seed,
                    apply_in_nominal: *apply_in_nominal,
                }
            }
        };
        let sup = &self.supervisor;
        let supervisor = SupervisorParams {
            sigma_w: match self.run.mode {
                Mode::Nominal => sup.sigma_w_nominal,
                Mode::Robust => sup.sigma_w_robust,
            },
            c_gamma: sup.c_gamma,
        };
        let t = &self.timing;
        let sc = ScenarioConfig {
            plant,
            controllers,
            x_set,
            u_set,
            mode: self.run.mode,
            selection: parse_selection(&self.run.controller, &self.run.psmpc_members)?,
            dt_sim: t.dt_sim_s,
            dt_mpc: t.dt_mpc_s,
            horizon: t.horizon_steps,
            t_final: t.t_final_s,
            x0,
            disturbance,
            energy: EnergyParams {
                mass_kg: self.energy.mass_kg,
                gravity_mps2: self.energy.gravity_mps2,
                v_trim_mps: self.energy.v_trim_mps,
                dt_mpc_s: t.dt_mpc_s,
            },
            supervisor,
            terminal: self.terminal,
        };
        sc.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        Ok(sc)
    }
}
