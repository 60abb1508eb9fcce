//! Continuous LTI plants, zero-order-hold discretization, plant integration
//! and state translators.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::rank;
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model: {0}")]
    InvalidModel(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Label {
    pub name: String,
    pub unit: String,
}

impl Label {
    pub fn new(name: impl Into<String>, unit: impl Into<String>) -> Self {
        Self { name: name.into(), unit: unit.into() }
    }
}

/// `ẋ = A x + B u (+ ν)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousLti<T: Real = f64> {
    pub a: DMatrix<T>,
    pub b: DMatrix<T>,
    pub state_labels: Vec<Label>,
    pub input_labels: Vec<Label>,
}

impl<T: Real> ContinuousLti<T> {
    pub fn new(a: DMatrix<T>, b: DMatrix<T>) -> Result<Self, ModelError> {
        let n = a.nrows();
        let m = b.ncols();
        let sys = Self {
            a,
            b,
            state_labels: (0..n).map(|i| Label::new(format!("x{i}"), "")).collect(),
            input_labels: (0..m).map(|i| Label::new(format!("u{i}"), "")).collect(),
        };
        sys.validate()?;
        Ok(sys)
    }

    pub fn with_labels(mut self, states: Vec<Label>, inputs: Vec<Label>) -> Result<Self, ModelError> {
        self.state_labels = states;
        self.input_labels = inputs;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.a.nrows() != self.a.ncols() || self.a.nrows() == 0 {
            return Err(ModelError::InvalidModel("A must be square and non-empty".into()));
        }
        if self.b.nrows() != self.a.nrows() {
            return Err(ModelError::InvalidModel(format!(
                "B has {} rows, A has {}",
                self.b.nrows(),
                self.a.nrows()
            )));
        }
        if self.a.iter().chain(self.b.iter()).any(|v| !v.finite()) {
            return Err(ModelError::InvalidModel("non-finite entries".into()));
        }
        if self.state_labels.len() != self.n() || self.input_labels.len() != self.m() {
            return Err(ModelError::InvalidModel("label count does not match dimensions".into()));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn deriv(&self, x: &DVector<T>, u: &DVector<T>, nu: &DVector<T>) -> DVector<T> {
        &self.a * x + &self.b * u + nu
    }
}

/// `x(k+1) = Ad x(k) + Bd u(k)` with sample time `dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteModel<T: Real = f64> {
    pub ad: DMatrix<T>,
    pub bd: DMatrix<T>,
    pub dt: T,
}

impl<T: Real> DiscreteModel<T> {
    pub fn n(&self) -> usize {
        self.ad.nrows()
    }

    pub fn m(&self) -> usize {
        self.bd.ncols()
    }

    pub fn step(&self, x: &DVector<T>, u: &DVector<T>) -> DVector<T> {
        &self.ad * x + &self.bd * u
    }
}

/// Exact ZOH discretization from the exponential of `[[A, B], [0, 0]]·dt`.
pub fn zoh_discretize<T: Real>(sys: &ContinuousLti<T>, dt: T) -> Result<DiscreteModel<T>, ModelError> {
    sys.validate()?;
    if !(dt > T::zero()) || !dt.finite() {
        return Err(ModelError::InvalidModel("dt must be positive".into()));
    }
    let (n, m) = (sys.n(), sys.m());
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(&sys.a * dt));
    aug.view_mut((0, n), (n, m)).copy_from(&(&sys.b * dt));
    let e = aug.exp();
    let ad = e.view((0, 0), (n, n)).into_owned();
    let bd = e.view((0, n), (n, m)).into_owned();
    if ad.iter().chain(bd.iter()).any(|v| !v.finite()) {
        return Err(ModelError::InvalidModel("matrix exponential overflowed".into()));
    }
    Ok(DiscreteModel { ad, bd, dt })
}

/// Fixed-step RK4 over `[0, dt]` with the input held. `nu` is evaluated at
/// the local time within the interval.
pub fn integrate_plant<T: Real, F>(
    sys: &ContinuousLti<T>,
    xi0: &DVector<T>,
    mu: &DVector<T>,
    nu: F,
    dt: T,
    substeps: usize,
) -> DVector<T>
where
    F: Fn(T) -> DVector<T>,
{
    let substeps = substeps.max(1);
    let h = dt / T::from_usize(substeps).unwrap();
    let half = T::lit(0.5);
    let two = T::lit(2.0);
    let sixth = T::one() / T::lit(6.0);
    let mut x = xi0.clone();
    for s in 0..substeps {
        let t = h * T::from_usize(s).unwrap();
        let k1 = sys.deriv(&x, mu, &nu(t));
        let k2 = sys.deriv(&(&x + &k1 * (h * half)), mu, &nu(t + h * half));
        let k3 = sys.deriv(&(&x + &k2 * (h * half)), mu, &nu(t + h * half));
        let k4 = sys.deriv(&(&x + &k3 * h), mu, &nu(t + h));
        x += (k1 + (k2 + k3) * two + k4) * (h * sixth);
    }
    x
}

/// Linear map from plant state to a controller's prediction state.
#[derive(Debug, Clone, PartialEq)]
pub struct Translator<T: Real = f64> {
    pub m: DMatrix<T>,
}

impl<T: Real> Translator<T> {
    pub fn identity(n: usize) -> Self {
        Self { m: DMatrix::identity(n, n) }
    }

    pub fn new(m: DMatrix<T>) -> Result<Self, ModelError> {
        if m.iter().any(|v| !v.finite()) {
            return Err(ModelError::InvalidModel("translator has non-finite entries".into()));
        }
        if rank(&m, T::lit(1e-10)) < m.nrows() {
            return Err(ModelError::InvalidModel("translator must have full row rank".into()));
        }
        Ok(Self { m })
    }

    pub fn translate(&self, xi: &DVector<T>) -> Result<DVector<T>, ModelError> {
        if xi.len() != self.m.ncols() {
            return Err(ModelError::InvalidModel(format!(
                "plant state has {} entries, translator expects {}",
                xi.len(),
                self.m.ncols()
            )));
        }
        Ok(&self.m * xi)
    }

    pub fn is_identity(&self) -> bool {
        self.m.is_square() && self.m == DMatrix::identity(self.m.nrows(), self.m.ncols())
    }
}

/// The stacked translator matrix has full column rank, so
/// `Σ‖Mᵢ ξ‖ ≥ c‖ξ‖` for some `c > 0`.
pub fn translators_jointly_injective<T: Real>(trs: &[Translator<T>]) -> bool {
    let Some(first) = trs.first() else {
        return false;
    };
    let n = first.m.ncols();
    if trs.iter().any(|t| t.m.ncols() != n) {
        return false;
    }
    let rows: usize = trs.iter().map(|t| t.m.nrows()).sum();
    let mut stacked = DMatrix::zeros(rows, n);
    let mut r = 0;
    for t in trs {
        stacked.rows_mut(r, t.m.nrows()).copy_from(&t.m);
        r += t.m.nrows();
    }
    rank(&stacked, T::lit(1e-10)) == n
}
