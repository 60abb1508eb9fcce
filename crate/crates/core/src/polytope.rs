//! Polytopes in halfspace representation `{x : Hx ≤ h}`.
//!
//! All queries are linear programs solved by the QP kernel with a zero cost
//! matrix.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::lp::{solve_lp, LpOutcome};
use crate::qp::{QpProblem, QpSettings, QpSolver, QpStatus};
use crate::scalar::Real;

/// Membership tolerance for [`Polytope::contains`].
pub const MEMBERSHIP_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SetError {
    #[error("invalid set: {0}")]
    InvalidSet(String),
    #[error("set is empty")]
    EmptySet,
    #[error("set is unbounded in the requested direction")]
    Unbounded,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("LP did not converge ({0:?})")]
    Solver(QpStatus),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Polytope<T: Real = f64> {
    h: DMatrix<T>,
    b: DVector<T>,
}

impl<T: Real> Polytope<T> {
    /// Build from raw rows; each row is scaled to unit Euclidean norm.
    pub fn new(h: DMatrix<T>, b: DVector<T>) -> Result<Self, SetError> {
        if h.nrows() != b.len() {
            return Err(SetError::InvalidSet(format!("{} rows but {} offsets", h.nrows(), b.len())));
        }
        if h.nrows() == 0 || h.ncols() == 0 {
            return Err(SetError::InvalidSet("need at least one row and one column".into()));
        }
        if h.iter().chain(b.iter()).any(|v| !v.finite()) {
            return Err(SetError::InvalidSet("non-finite entries".into()));
        }
        let mut h = h;
        let mut b = b;
        for i in 0..h.nrows() {
            let norm = h.row(i).norm();
            if norm <= T::lit(1e-14) {
                return Err(SetError::InvalidSet(format!("row {i} is zero")));
            }
            h.row_mut(i).unscale_mut(norm);
            b[i] /= norm;
        }
        Ok(Self { h, b })
    }

    /// `lower ≤ x ≤ upper`, as `2n` rows (upper bounds first, then lower).
    pub fn from_box(lower: &[T], upper: &[T]) -> Result<Self, SetError> {
        if lower.len() != upper.len() {
            return Err(SetError::DimensionMismatch { expected: lower.len(), got: upper.len() });
        }
        let n = lower.len();
        for i in 0..n {
            if !(lower[i] < upper[i]) {
                return Err(SetError::InvalidSet(format!("coordinate {i}: lower bound not below upper bound")));
            }
        }
        let mut h = DMatrix::zeros(2 * n, n);
        let mut b = DVector::zeros(2 * n);
        for i in 0..n {
            h[(i, i)] = T::one();
            b[i] = upper[i];
            h[(n + i, i)] = -T::one();
            b[n + i] = -lower[i];
        }
        Self::new(h, b)
    }

    pub fn dim(&self) -> usize {
        self.h.ncols()
    }

    pub fn num_rows(&self) -> usize {
        self.h.nrows()
    }

    pub fn h(&self) -> &DMatrix<T> {
        &self.h
    }

    pub fn b(&self) -> &DVector<T> {
        &self.b
    }

    pub fn contains(&self, x: &DVector<T>) -> bool {
        self.contains_tol(x, T::lit(MEMBERSHIP_TOL))
    }

    pub fn contains_tol(&self, x: &DVector<T>, tol: T) -> bool {
        x.len() == self.dim() && self.max_violation(x) <= tol
    }

    /// `max_i (H_i x − h_i)`; non-positive inside the set.
    pub fn max_violation(&self, x: &DVector<T>) -> T {
        let hx = &self.h * x;
        (0..self.num_rows()).fold(T::NEG_INFINITY, |a, i| a.max(hx[i] - self.b[i]))
    }

    pub fn intersect(&self, other: &Self) -> Result<Self, SetError> {
        if self.dim() != other.dim() {
            return Err(SetError::DimensionMismatch { expected: self.dim(), got: other.dim() });
        }
        let q1 = self.num_rows();
        let q = q1 + other.num_rows();
        let mut h = DMatrix::zeros(q, self.dim());
        h.rows_mut(0, q1).copy_from(&self.h);
        h.rows_mut(q1, other.num_rows()).copy_from(&other.h);
        let b = DVector::from_iterator(q, self.b.iter().chain(other.b.iter()).copied());
        Ok(Self { h, b })
    }

    /// Append rows `G x ≤ g` (rows are normalized; zero rows are skipped when
    /// `g ≥ 0`, rejected otherwise).
    pub fn with_rows(&self, g_mat: &DMatrix<T>, g: &DVector<T>) -> Result<Self, SetError> {
        let mut rows_h = Vec::new();
        let mut rows_b = Vec::new();
        for i in 0..g_mat.nrows() {
            let norm = g_mat.row(i).norm();
            if norm <= T::lit(1e-14) {
                if g[i] < T::zero() {
                    return Err(SetError::EmptySet);
                }
                continue;
            }
            rows_h.push(g_mat.row(i).unscale(norm));
            rows_b.push(g[i] / norm);
        }
        let q1 = self.num_rows();
        let mut h = DMatrix::zeros(q1 + rows_h.len(), self.dim());
        h.rows_mut(0, q1).copy_from(&self.h);
        for (k, r) in rows_h.iter().enumerate() {
            h.row_mut(q1 + k).copy_from(r);
        }
        let b = DVector::from_iterator(q1 + rows_b.len(), self.b.iter().copied().chain(rows_b));
        Ok(Self { h, b })
    }

    /// `{β x : x ∈ P}` for `β > 0`.
    pub fn scaled(&self, beta: T) -> Self {
        Self { h: self.h.clone(), b: &self.b * beta }
    }

    /// `max dᵀx` over the set.
    pub fn support(&self, d: &DVector<T>) -> Result<T, SetError> {
        self.support_with(&mut lp_solver(), d)
    }

    pub fn support_with(&self, solver: &mut QpSolver<T>, d: &DVector<T>) -> Result<T, SetError> {
        if d.len() != self.dim() {
            return Err(SetError::DimensionMismatch { expected: self.dim(), got: d.len() });
        }
        lp_max(solver, &self.h, &self.b, d)
    }

    /// One feasibility LP.
    pub fn is_empty(&self) -> Result<bool, SetError> {
        let n = self.dim();
        let lp = QpProblem::linear(
            DVector::zeros(n),
            self.h.clone(),
            DVector::from_element(self.num_rows(), T::NEG_INFINITY),
            self.b.clone(),
        )
        .map_err(|e| SetError::InvalidSet(e.to_string()))?;
        let sol = lp_solver().solve(&lp, None);
        match sol.status {
            QpStatus::Solved => Ok(false),
            QpStatus::PrimalInfeasible => Ok(true),
            s => Err(SetError::Solver(s)),
        }
    }

    /// Minimal representation: drop every row certified redundant by
    /// `max Hᵣx s.t. remaining rows ≤ hᵣ + tol`.
    pub fn remove_redundancy(&self) -> Result<Self, SetError> {
        self.remove_redundancy_tol(T::lit(1e-9))
    }

    pub fn remove_redundancy_tol(&self, tol: T) -> Result<Self, SetError> {
        if self.is_empty()? {
            return Err(SetError::EmptySet);
        }
        let q = self.num_rows();
        if q == 1 {
            return Ok(self.clone());
        }
        let mut keep = vec![true; q];
        // exact duplicates first (rows are normalized)
        for i in 0..q {
            if !keep[i] {
                continue;
            }
            for j in (i + 1)..q {
                if keep[j] && (self.h.row(i) - self.h.row(j)).amax() <= T::lit(1e-12) {
                    if self.b[j] >= self.b[i] {
                        keep[j] = false;
                    } else {
                        keep[i] = false;
                        break;
                    }
                }
            }
        }
        let mut solver = lp_solver();
        for r in 0..q {
            if !keep[r] {
                continue;
            }
            keep[r] = false;
            let idx: Vec<usize> = (0..q).filter(|&i| keep[i]).collect();
            if idx.is_empty() {
                keep[r] = true;
                continue;
            }
            let sub_h = self.h.select_rows(&idx);
            let sub_b = self.b.select_rows(&idx);
            let d = self.h.row(r).transpose();
            let redundant = match lp_max(&mut solver, &sub_h, &sub_b, &d) {
                Ok(v) => v <= self.b[r] + tol,
                Err(SetError::Unbounded) => false,
                Err(e) => return Err(e),
            };
            keep[r] = !redundant;
        }
        let idx: Vec<usize> = (0..q).filter(|&i| keep[i]).collect();
        Ok(Self { h: self.h.select_rows(&idx), b: self.b.select_rows(&idx) })
    }

    /// Pairs of antiparallel rows merged into two-sided rows
    /// `lo ≤ aᵀx ≤ hi`; used to keep OCP constraint counts small.
    pub fn two_sided_rows(&self) -> (DMatrix<T>, DVector<T>, DVector<T>) {
        let q = self.num_rows();
        let mut used = vec![false; q];
        let mut rows = Vec::new();
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        for i in 0..q {
            if used[i] {
                continue;
            }
            used[i] = true;
            let partner = ((i + 1)..q).find(|&j| !used[j] && (self.h.row(i) + self.h.row(j)).amax() <= T::lit(1e-12));
            rows.push(self.h.row(i).clone_owned());
            hi.push(self.b[i]);
            match partner {
                Some(j) => {
                    used[j] = true;
                    lo.push(-self.b[j]);
                }
                None => lo.push(T::NEG_INFINITY),
            }
        }
        let mut h = DMatrix::zeros(rows.len(), self.dim());
        for (k, r) in rows.iter().enumerate() {
            h.row_mut(k).copy_from(r);
        }
        (h, DVector::from_vec(lo), DVector::from_vec(hi))
    }

    /// Axis-aligned bounding box via `2n` support LPs.
    pub fn bounding_box(&self) -> Result<(DVector<T>, DVector<T>), SetError> {
        let n = self.dim();
        let mut solver = lp_solver();
        let mut lo = DVector::zeros(n);
        let mut hi = DVector::zeros(n);
        for i in 0..n {
            let mut e = DVector::zeros(n);
            e[i] = T::one();
            hi[i] = self.support_with(&mut solver, &e)?;
            e[i] = -T::one();
            lo[i] = -self.support_with(&mut solver, &e)?;
        }
        Ok((lo, hi))
    }
}

pub(crate) fn lp_solver<T: Real>() -> QpSolver<T> {
    QpSolver::new(QpSettings { max_iter: 500, ..QpSettings::default() })
}

/// `max dᵀx s.t. Hx ≤ h`.
pub(crate) fn lp_max<T: Real>(
    solver: &mut QpSolver<T>,
    h: &DMatrix<T>,
    b: &DVector<T>,
    d: &DVector<T>,
) -> Result<T, SetError> {
    let n = h.ncols();
    if d.amax() == T::zero() {
        return Ok(T::zero());
    }
    let lp = QpProblem::linear(-d, h.clone(), DVector::from_element(h.nrows(), T::NEG_INFINITY), b.clone())
        .map_err(|e| SetError::InvalidSet(e.to_string()))?;
    debug_assert_eq!(lp.num_vars(), n);
    match solve_lp(&lp, 50 * (n + h.nrows()) + 100) {
        LpOutcome::Optimal { z, .. } => return Ok(d.dot(&z)),
        LpOutcome::Infeasible { .. } => return Err(SetError::EmptySet),
        LpOutcome::Unbounded { .. } => return Err(SetError::Unbounded),
        LpOutcome::Stalled { .. } => {}
    }
    let sol = solver.solve(&lp, None);
    match sol.status {
        QpStatus::Solved => Ok(d.dot(&sol.z)),
        QpStatus::PrimalInfeasible => Err(SetError::EmptySet),
        QpStatus::DualInfeasible => Err(SetError::Unbounded),
        QpStatus::MaxIter => Err(SetError::Solver(QpStatus::MaxIter)),
    }
}
