//! Optimal control problems as sparse multiple-shooting QPs: nominal,
//! composed leader/restrictor, and robust soft-initial-state.
//!
//! Decision vector, stage by stage: `x(0), u(0), x(1), xˡ(1)…, u(1), …,
//! x(N), xˡ(N)…`. Restrictor trajectories start at stage 1.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::lti::{DiscreteModel, Translator};
use crate::polytope::Polytope;
use crate::qp::{QpProblem, QpSettings, QpSolution, QpSolver, QpStatus, WarmStart};
use crate::scalar::Real;
use crate::terminal::TerminalKit;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OcpError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("composed OCP of controller {leader} infeasible: recursive feasibility violated ({diagnostic})")]
    Lemma2Violation { leader: usize, diagnostic: String },
    #[error("OCP of controller {id} not solved ({status:?})")]
    NotSolved { id: usize, status: QpStatus },
}

/// One controller: prediction model, weights, terminal ingredients and
/// constraint sets.
#[derive(Debug, Clone)]
pub struct MpcConfig<T: Real = f64> {
    pub id: usize,
    pub name: String,
    pub model: DiscreteModel<T>,
    pub q: DMatrix<T>,
    pub r: DMatrix<T>,
    pub kit: TerminalKit<T>,
    pub horizon: usize,
    pub x_set: Polytope<T>,
    pub u_set: Polytope<T>,
    pub lambda: T,
    pub translator: Translator<T>,
}

fn is_spd<T: Real>(m: &DMatrix<T>) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= T::lit(1e-12) * T::one().max(m.amax()) && m.clone().cholesky().is_some()
}

impl<T: Real> MpcConfig<T> {
    pub fn n(&self) -> usize {
        self.model.n()
    }

    pub fn m(&self) -> usize {
        self.model.m()
    }

    pub fn validate(&self, robust: bool) -> Result<(), OcpError> {
        let (n, m) = (self.n(), self.m());
        let bad = |s: &str| Err(OcpError::InvalidConfig(format!("controller {}: {s}", self.id)));
        if !is_spd(&self.q) || self.q.nrows() != n {
            return bad("Q must be symmetric positive definite and match the state dimension");
        }
        if !is_spd(&self.r) || self.r.nrows() != m {
            return bad("R must be symmetric positive definite and match the input dimension");
        }
        if self.horizon < 2 {
            return bad("horizon must be at least 2");
        }
        if self.x_set.dim() != n || self.u_set.dim() != m || self.kit.xn.dim() != n {
            return bad("constraint set dimensions do not match the model");
        }
        if self.kit.p.shape() != (n, n) || self.kit.k.shape() != (m, n) {
            return bad("terminal ingredients do not match the model");
        }
        if self.translator.m.nrows() != n {
            return bad("translator output dimension does not match the model");
        }
        if robust && !(self.lambda > T::zero()) {
            return bad("robust mode needs lambda > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OcpKind {
    Nominal,
    Composed,
    Robust,
}

/// Variable offsets inside the decision vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
    pub x: Vec<usize>,
    pub u: Vec<usize>,
    /// `xl[r][s]` for restrictor `r`, stage `s = 1..=N` (index 0 unused).
    pub xl: Vec<Vec<usize>>,
    pub restrictor_dims: Vec<usize>,
    pub num_vars: usize,
}

impl Layout {
    fn new(n: usize, m: usize, horizon: usize, restrictor_dims: &[usize]) -> Self {
        let mut off = 0;
        let mut x = Vec::with_capacity(horizon + 1);
        let mut u = Vec::with_capacity(horizon);
        let mut xl = vec![vec![usize::MAX; horizon + 1]; restrictor_dims.len()];
        for j in 0..=horizon {
            x.push(off);
            off += n;
            if j >= 1 {
                for (r, &nl) in restrictor_dims.iter().enumerate() {
                    xl[r][j] = off;
                    off += nl;
                }
            }
            if j < horizon {
                u.push(off);
                off += m;
            }
        }
        Self { n, m, horizon, x, u, xl, restrictor_dims: restrictor_dims.to_vec(), num_vars: off }
    }
}

/// A built OCP: the QP plus what is needed to read it back.
#[derive(Debug, Clone)]
pub struct OcpQp<T: Real = f64> {
    pub qp: QpProblem<T>,
    pub layout: Layout,
    pub kind: OcpKind,
    pub leader: usize,
    pub restrictors: Vec<usize>,
    /// Rows of the initial-state equality (nominal and composed).
    pub init_rows: Option<std::ops::Range<usize>>,
}

struct Rows<T: Real> {
    nv: usize,
    entries: Vec<Vec<(usize, T)>>,
    lo: Vec<T>,
    hi: Vec<T>,
}

impl<T: Real> Rows<T> {
    fn new(nv: usize) -> Self {
        Self { nv, entries: Vec::new(), lo: Vec::new(), hi: Vec::new() }
    }

    fn len(&self) -> usize {
        self.lo.len()
    }

    fn push(&mut self, e: Vec<(usize, T)>, lo: T, hi: T) {
        self.entries.push(e);
        self.lo.push(lo);
        self.hi.push(hi);
    }

    /// `lo ≤ H v ≤ hi` on the block starting at `off`.
    fn set_rows(&mut self, set: &(DMatrix<T>, DVector<T>, DVector<T>), off: usize) {
        let (h, lo, hi) = set;
        for i in 0..h.nrows() {
            let e = (0..h.ncols()).filter(|&j| h[(i, j)] != T::zero()).map(|j| (off + j, h[(i, j)])).collect();
            self.push(e, lo[i], hi[i]);
        }
    }

    /// `x_next − A x_cur − B u = 0`.
    fn dynamics(&mut self, a: &DMatrix<T>, b: &DMatrix<T>, cur: usize, u: usize, next: usize) {
        for i in 0..a.nrows() {
            let mut e = vec![(next + i, T::one())];
            for j in 0..a.ncols() {
                if a[(i, j)] != T::zero() {
                    e.push((cur + j, -a[(i, j)]));
                }
            }
            for j in 0..b.ncols() {
                if b[(i, j)] != T::zero() {
                    e.push((u + j, -b[(i, j)]));
                }
            }
            self.push(e, T::zero(), T::zero());
        }
    }

    fn dense(self) -> (DMatrix<T>, DVector<T>, DVector<T>) {
        let mut c = DMatrix::zeros(self.len(), self.nv);
        for (i, e) in self.entries.iter().enumerate() {
            for &(j, v) in e {
                c[(i, j)] += v;
            }
        }
        (c, DVector::from_vec(self.lo), DVector::from_vec(self.hi))
    }
}

fn add_block<T: Real>(h: &mut DMatrix<T>, off: usize, w: &DMatrix<T>, scale: T) {
    let k = w.nrows();
    let mut v = h.view_mut((off, off), (k, k));
    v += w * scale;
}

fn build<T: Real>(
    leader: &MpcConfig<T>,
    restrictors: &[&MpcConfig<T>],
    x0: &DVector<T>,
    kind: OcpKind,
) -> Result<OcpQp<T>, OcpError> {
    leader.validate(kind == OcpKind::Robust)?;
    let (n, m, nh) = (leader.n(), leader.m(), leader.horizon);
    if x0.len() != n || x0.iter().any(|v| !v.finite()) {
        return Err(OcpError::InvalidConfig("initial state has wrong size or non-finite entries".into()));
    }
    let mut couplings = Vec::new();
    for r in restrictors {
        r.validate(false)?;
        if r.m() != m {
            return Err(OcpError::InvalidConfig("restrictors must share the leader's input dimension".into()));
        }
        if r.id == leader.id {
            return Err(OcpError::InvalidConfig("leader cannot be its own restrictor".into()));
        }
        couplings.push(coupling(leader, r)?);
    }
    let dims: Vec<usize> = restrictors.iter().map(|r| r.n()).collect();
    let lay = Layout::new(n, m, nh, &dims);
    let nv = lay.num_vars;
    let two = T::lit(2.0);

    let mut hc = DMatrix::zeros(nv, nv);
    let mut g = DVector::zeros(nv);
    let mut offset = T::zero();
    for j in 0..nh {
        add_block(&mut hc, lay.x[j], &leader.q, two);
        add_block(&mut hc, lay.u[j], &leader.r, two);
    }
    add_block(&mut hc, lay.x[nh], &leader.kit.p, two);
    if kind == OcpKind::Robust {
        // λ‖x − x̄‖²_P
        let p = &leader.kit.p;
        add_block(&mut hc, lay.x[0], p, two * leader.lambda);
        let px = p * x0;
        for i in 0..n {
            g[lay.x[0] + i] = -two * leader.lambda * px[i];
        }
        offset = leader.lambda * x0.dot(&px);
    }

    let xs = leader.x_set.two_sided_rows();
    let us = leader.u_set.two_sided_rows();
    let xn = leader.kit.xn.two_sided_rows();
    let rsets: Vec<_> = restrictors
        .iter()
        .map(|r| (r.x_set.two_sided_rows(), r.u_set.two_sided_rows(), r.kit.xn.two_sided_rows()))
        .collect();

    let mut rows = Rows::new(nv);
    let mut init_rows = None;
    if kind != OcpKind::Robust {
        let start = rows.len();
        for i in 0..n {
            rows.push(vec![(lay.x[0] + i, T::one())], x0[i], x0[i]);
        }
        init_rows = Some(start..rows.len());
    }
    for j in 0..nh {
        rows.set_rows(&xs, lay.x[j]);
        rows.set_rows(&us, lay.u[j]);
        rows.dynamics(&leader.model.ad, &leader.model.bd, lay.x[j], lay.u[j], lay.x[j + 1]);
        for (ri, r) in restrictors.iter().enumerate() {
            let (rx, ru, _) = &rsets[ri];
            if j == 0 {
                // xˡ(1) = C x(1)
                let c = &couplings[ri];
                for i in 0..r.n() {
                    let mut e = vec![(lay.xl[ri][1] + i, T::one())];
                    for k in 0..n {
                        if c[(i, k)] != T::zero() {
                            e.push((lay.x[1] + k, -c[(i, k)]));
                        }
                    }
                    rows.push(e, T::zero(), T::zero());
                }
            } else {
                rows.set_rows(rx, lay.xl[ri][j]);
                rows.set_rows(ru, lay.u[j]);
                rows.dynamics(&r.model.ad, &r.model.bd, lay.xl[ri][j], lay.u[j], lay.xl[ri][j + 1]);
            }
        }
    }
    rows.set_rows(&xn, lay.x[nh]);
    for (ri, _) in restrictors.iter().enumerate() {
        rows.set_rows(&rsets[ri].2, lay.xl[ri][nh]);
    }
    let (c, lb, ub) = rows.dense();
    let mut qp = QpProblem::new(hc, g, c, lb, ub).map_err(|e| OcpError::InvalidConfig(e.to_string()))?;
    qp.offset = offset;
    Ok(OcpQp {
        qp,
        layout: lay,
        kind,
        leader: leader.id,
        restrictors: restrictors.iter().map(|r| r.id).collect(),
        init_rows,
    })
}

/// Map from the leader's prediction state to a restrictor's:
/// `M_l M_i⁻¹` (identity for identical translators).
fn coupling<T: Real>(leader: &MpcConfig<T>, r: &MpcConfig<T>) -> Result<DMatrix<T>, OcpError> {
    if leader.translator == r.translator {
        return Ok(DMatrix::identity(r.n(), leader.n()));
    }
    let inv = leader.translator.m.clone().try_inverse().ok_or_else(|| {
        OcpError::InvalidConfig(format!(
            "controller {}: composing with restrictor {} needs an invertible leader translator",
            leader.id, r.id
        ))
    })?;
    Ok(&r.translator.m * inv)
}

pub fn build_nominal<T: Real>(cfg: &MpcConfig<T>, x0: &DVector<T>) -> Result<OcpQp<T>, OcpError> {
    build(cfg, &[], x0, OcpKind::Nominal)
}

pub fn build_composed<T: Real>(
    leader: &MpcConfig<T>,
    restrictors: &[&MpcConfig<T>],
    x0: &DVector<T>,
) -> Result<OcpQp<T>, OcpError> {
    let kind = if restrictors.is_empty() { OcpKind::Nominal } else { OcpKind::Composed };
    build(leader, restrictors, x0, kind)
}

pub fn build_robust<T: Real>(cfg: &MpcConfig<T>, x_measured: &DVector<T>) -> Result<OcpQp<T>, OcpError> {
    build(cfg, &[], x_measured, OcpKind::Robust)
}

impl<T: Real> OcpQp<T> {
    /// Move the problem to a new measured state without rebuilding.
    pub fn set_initial_state(&mut self, cfg: &MpcConfig<T>, x0: &DVector<T>) {
        match self.kind {
            OcpKind::Robust => {
                let two = T::lit(2.0);
                let px = &cfg.kit.p * x0;
                let o = self.layout.x[0];
                for i in 0..self.layout.n {
                    self.qp.g[o + i] = -two * cfg.lambda * px[i];
                }
                self.qp.offset = cfg.lambda * x0.dot(&px);
            }
            _ => {
                let r = self.init_rows.clone().expect("nominal problems carry initial rows");
                for (k, i) in r.enumerate() {
                    self.qp.lb[i] = x0[k];
                    self.qp.ub[i] = x0[k];
                }
            }
        }
    }

    /// Decision vector generated by an input sequence (`m × N`) from `x0`.
    pub fn trajectory_vector(
        &self,
        leader: &MpcConfig<T>,
        restrictors: &[&MpcConfig<T>],
        x0: &DVector<T>,
        inputs: &DMatrix<T>,
    ) -> DVector<T> {
        let lay = &self.layout;
        let mut z = DVector::zeros(lay.num_vars);
        let mut x = x0.clone();
        let mut xl: Vec<DVector<T>> = Vec::new();
        for j in 0..=lay.horizon {
            z.rows_mut(lay.x[j], lay.n).copy_from(&x);
            if j == 1 {
                xl = restrictors
                    .iter()
                    .map(|r| coupling(leader, r).map(|c| c * &x).unwrap_or_else(|_| DVector::zeros(r.n())))
                    .collect();
            }
            if j >= 1 {
                for (ri, v) in xl.iter().enumerate() {
                    z.rows_mut(lay.xl[ri][j], v.len()).copy_from(v);
                }
            }
            if j < lay.horizon {
                let u = inputs.column(j).into_owned();
                z.rows_mut(lay.u[j], lay.m).copy_from(&u);
                let xnext = leader.model.step(&x, &u);
                if j >= 1 {
                    for (ri, r) in restrictors.iter().enumerate() {
                        xl[ri] = r.model.step(&xl[ri], &u);
                    }
                }
                x = xnext;
            }
        }
        z
    }

    /// Largest violation of any constraint row by `z` (0 when feasible).
    pub fn max_violation(&self, z: &DVector<T>) -> T {
        let cz = &self.qp.c * z;
        (0..cz.len()).fold(T::zero(), |acc, i| acc.max(self.qp.lb[i] - cz[i]).max(cz[i] - self.qp.ub[i]))
    }
}

#[derive(Debug, Clone)]
pub struct OcpStats {
    pub iters: usize,
    pub primal_res: f64,
    pub dual_res: f64,
    pub polished: bool,
}

#[derive(Debug, Clone)]
pub struct OcpSolution<T: Real = f64> {
    pub id: usize,
    /// `m × N`
    pub u_star: DMatrix<T>,
    /// `n × (N+1)`
    pub x_star: DMatrix<T>,
    /// Restrictor trajectories, `n_l × N` for stages `1..=N`.
    pub restrictor_x: Vec<DMatrix<T>>,
    pub v: T,
    pub xbar: DVector<T>,
    pub feasible: bool,
    pub status: QpStatus,
    pub stats: OcpStats,
    pub raw: QpSolution<T>,
}

impl<T: Real> OcpSolution<T> {
    pub fn first_input(&self) -> DVector<T> {
        self.u_star.column(0).into_owned()
    }

    pub fn warm_start(&self) -> WarmStart<T> {
        WarmStart::from(&self.raw)
    }
}

pub fn default_ocp_settings<T: Real>() -> QpSettings<T> {
    QpSettings::default()
}

pub fn solve<T: Real>(
    cfg: &MpcConfig<T>,
    ocp: &OcpQp<T>,
    solver: &mut QpSolver<T>,
    warm: Option<&WarmStart<T>>,
) -> Result<OcpSolution<T>, OcpError> {
    let sol = solver.solve(&ocp.qp, warm);
    match sol.status {
        QpStatus::Solved | QpStatus::MaxIter => {}
        QpStatus::PrimalInfeasible if ocp.kind == OcpKind::Composed => {
            return Err(OcpError::Lemma2Violation {
                leader: cfg.id,
                diagnostic: format!("restrictors {:?}, {} iterations", ocp.restrictors, sol.iters),
            })
        }
        status => return Err(OcpError::NotSolved { id: cfg.id, status }),
    }
    if sol.status == QpStatus::MaxIter {
        log::warn!(
            "controller {}: QP hit the iteration limit (primal {:.2e}, dual {:.2e})",
            cfg.id,
            sol.primal_res.to_f64_lossy(),
            sol.dual_res.to_f64_lossy()
        );
    }
    let lay = &ocp.layout;
    let (n, m, nh) = (lay.n, lay.m, lay.horizon);
    let mut x_star = DMatrix::zeros(n, nh + 1);
    let mut u_star = DMatrix::zeros(m, nh);
    for j in 0..=nh {
        x_star.column_mut(j).copy_from(&sol.z.rows(lay.x[j], n));
        if j < nh {
            u_star.column_mut(j).copy_from(&sol.z.rows(lay.u[j], m));
        }
    }
    let restrictor_x = lay
        .restrictor_dims
        .iter()
        .enumerate()
        .map(|(ri, &nl)| {
            let mut t = DMatrix::zeros(nl, nh);
            for s in 1..=nh {
                t.column_mut(s - 1).copy_from(&sol.z.rows(lay.xl[ri][s], nl));
            }
            t
        })
        .collect();
    let xbar = x_star.column(0).into_owned();
    Ok(OcpSolution {
        id: cfg.id,
        u_star,
        x_star,
        restrictor_x,
        v: sol.obj.max(T::zero()),
        xbar,
        feasible: sol.status == QpStatus::Solved,
        status: sol.status,
        stats: OcpStats {
            iters: sol.iters,
            primal_res: sol.primal_res.to_f64_lossy(),
            dual_res: sol.dual_res.to_f64_lossy(),
            polished: sol.polished,
        },
        raw: sol,
    })
}

/// Drop the first input and append the terminal law at the predicted
/// terminal state: `[U*(1..N−1), −K x*(N)]`.
pub fn shifted_candidate<T: Real>(prev: &OcpSolution<T>, cfg: &MpcConfig<T>) -> DMatrix<T> {
    let nh = prev.u_star.ncols();
    let mut out = DMatrix::zeros(prev.u_star.nrows(), nh);
    for j in 1..nh {
        out.column_mut(j - 1).copy_from(&prev.u_star.column(j));
    }
    let xn = prev.x_star.column(nh).into_owned();
    out.column_mut(nh - 1).copy_from(&(-(&cfg.kit.k * xn)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::terminal::{synthesize_kit, TerminalSettings};

    fn scalar_cfg(id: usize, a: f64, b: f64, q: f64, r: f64, bound: f64, horizon: usize) -> MpcConfig<f64> {
        let model = DiscreteModel { ad: DMatrix::from_element(1, 1, a), bd: DMatrix::from_element(1, 1, b), dt: 1.0 };
        let x_set = Polytope::from_box(&[-bound], &[bound]).unwrap();
        let u_set = Polytope::from_box(&[-bound], &[bound]).unwrap();
        let qm = DMatrix::from_element(1, 1, q);
        let rm = DMatrix::from_element(1, 1, r);
        let kit = synthesize_kit(&model, &qm, &rm, &x_set, &u_set, &TerminalSettings::default()).unwrap();
        MpcConfig {
            id,
            name: format!("c{id}"),
            model,
            q: qm,
            r: rm,
            kit,
            horizon,
            x_set,
            u_set,
            lambda: 10.0,
            translator: Translator::identity(1),
        }
    }

    fn run(cfg: &MpcConfig<f64>, ocp: &OcpQp<f64>) -> OcpSolution<f64> {
        solve(cfg, ocp, &mut QpSolver::new(QpSettings::default()), None).unwrap()
    }

    #[test]
    fn layout_is_stage_ordered() {
        let l = Layout::new(2, 1, 3, &[2]);
        assert_eq!(l.x, vec![0, 3, 8, 13]);
        assert_eq!(l.u, vec![2, 7, 12]);
        assert_eq!(l.xl[0][1..], [5, 10, 15]);
        assert_eq!(l.num_vars, 17);
    }

    #[test]
    fn origin_is_free() {
        let cfg = scalar_cfg(0, 1.0, 1.0, 1.0, 1.0, 100.0, 3);
        let sol = run(&cfg, &build_nominal(&cfg, &DVector::zeros(1)).unwrap());
        assert!(sol.v.abs() < 1e-12);
        assert!(sol.u_star.amax() < 1e-9 && sol.x_star.amax() < 1e-9);
    }

    #[test]
    fn matches_dynamic_programming() {
        // two steps, loose constraints: cost-to-go p_{k} = q + a²p_{k+1} − (abp_{k+1})²/(r + b²p_{k+1})
        let cfg = scalar_cfg(0, 1.0, 1.0, 1.0, 1.0, 100.0, 2);
        let p = cfg.kit.p[(0, 0)];
        let step = |pn: f64| 1.0 + pn - pn * pn / (1.0 + pn);
        let v = step(step(p));
        let sol = run(&cfg, &build_nominal(&cfg, &DVector::from_element(1, 1.0)).unwrap());
        assert!((sol.v - v).abs() < 1e-7, "{} vs {v}", sol.v);
    }

    #[test]
    fn empty_composition_is_nominal() {
        let cfg = scalar_cfg(0, 0.9, 1.0, 1.0, 1.0, 2.0, 4);
        let x0 = DVector::from_element(1, 0.7);
        let a = build_nominal(&cfg, &x0).unwrap();
        let b = build_composed(&cfg, &[], &x0).unwrap();
        assert_eq!(a.qp, b.qp);
    }

    #[test]
    fn self_restrictor_same_value() {
        let cfg = scalar_cfg(0, 1.1, 1.0, 1.0, 1.0, 2.0, 5);
        let twin = MpcConfig { id: 1, ..cfg.clone() };
        let x0 = DVector::from_element(1, 1.2);
        let a = run(&cfg, &build_nominal(&cfg, &x0).unwrap());
        let b = run(&cfg, &build_composed(&cfg, &[&twin], &x0).unwrap());
        assert!((a.v - b.v).abs() < 1e-6);
        assert!((a.u_star.clone() - b.u_star.clone()).amax() < 1e-6);
        assert!((b.restrictor_x[0].column(0)[0] - b.x_star[(0, 1)]).abs() < 1e-9);
    }

    #[test]
    fn robust_penalty_pulls_toward_measurement() {
        let cfg = scalar_cfg(0, 1.0, 1.0, 1.0, 1.0, 100.0, 3);
        let x = DVector::from_element(1, 0.5);
        let nom = run(&cfg, &build_nominal(&cfg, &x).unwrap());
        let rob = run(&cfg, &build_robust(&cfg, &x).unwrap());
        assert!(rob.v <= nom.v + 1e-9);
        let big = MpcConfig { lambda: 1e8, ..cfg.clone() };
        let rob = run(&big, &build_robust(&big, &x).unwrap());
        assert!((rob.xbar[0] - 0.5).abs() < 1e-5);
        assert!((rob.v - nom.v).abs() < 1e-4 * nom.v);
        let zero = run(&cfg, &build_robust(&cfg, &DVector::zeros(1)).unwrap());
        assert!(zero.v.abs() < 1e-10 && zero.xbar[0].abs() < 1e-9);
    }

    #[test]
    fn robust_projects_far_states() {
        let cfg = scalar_cfg(0, 0.9, 1.0, 1.0, 1.0, 1.0, 3);
        let sol = run(&cfg, &build_robust(&cfg, &DVector::from_element(1, 50.0)).unwrap());
        assert_eq!(sol.status, QpStatus::Solved);
        assert!(cfg.x_set.contains_tol(&sol.xbar, 1e-7));
    }

    #[test]
    fn shifted_candidate_feasible() {
        let cfg = scalar_cfg(0, 1.2, 1.0, 1.0, 1.0, 1.0, 6);
        let x0 = DVector::from_element(1, 0.6);
        let sol = run(&cfg, &build_nominal(&cfg, &x0).unwrap());
        let cand = shifted_candidate(&sol, &cfg);
        let x1 = sol.x_star.column(1).into_owned();
        let next = build_nominal(&cfg, &x1).unwrap();
        let z = next.trajectory_vector(&cfg, &[], &x1, &cand);
        assert!(next.max_violation(&z) <= 1e-7);
        let zero = run(&cfg, &build_nominal(&cfg, &DVector::zeros(1)).unwrap());
        assert!(shifted_candidate(&zero, &cfg).amax() < 1e-9);
    }

    #[test]
    fn composed_infeasible_is_reported() {
        let cfg = scalar_cfg(0, 1.0, 1.0, 1.0, 1.0, 1.0, 3);
        let mut tight = scalar_cfg(1, 1.0, 1.0, 1.0, 1.0, 1.0, 3);
        tight.x_set = Polytope::from_box(&[-1.0], &[-0.9]).unwrap();
        tight.kit.xn = tight.x_set.clone();
        let x0 = DVector::from_element(1, 0.9);
        let err = solve(&cfg, &build_composed(&cfg, &[&tight], &x0).unwrap(), &mut QpSolver::new(QpSettings::default()), None);
        assert!(matches!(err, Err(OcpError::Lemma2Violation { leader: 0, .. })), "{err:?}");
    }

    #[test]
    fn set_initial_state_equals_rebuild() {
        let cfg = scalar_cfg(0, 1.0, 1.0, 1.0, 1.0, 3.0, 3);
        let mut a = build_nominal(&cfg, &DVector::from_element(1, 0.1)).unwrap();
        a.set_initial_state(&cfg, &DVector::from_element(1, -0.4));
        assert_eq!(a.qp, build_nominal(&cfg, &DVector::from_element(1, -0.4)).unwrap().qp);
        let mut r = build_robust(&cfg, &DVector::from_element(1, 0.1)).unwrap();
        r.set_initial_state(&cfg, &DVector::from_element(1, -0.4));
        assert_eq!(r.qp, build_robust(&cfg, &DVector::from_element(1, -0.4)).unwrap().qp);
    }
}
