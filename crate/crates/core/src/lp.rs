//! Exact LP fallback: revised simplex (Bland's rule) on the dual of
//! `min gᵀz s.t. l ≤ Cz ≤ u`, which is in standard form with one equality
//! per primal variable.

use nalgebra::{DMatrix, DVector};

use crate::qp::QpProblem;
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum LpOutcome<T: Real> {
    /// Primal `z` and row duals `y` (positive at an upper bound).
    Optimal { z: DVector<T>, y: DVector<T>, pivots: usize },
    Infeasible { pivots: usize },
    Unbounded { pivots: usize },
    Stalled { pivots: usize },
}

struct Column {
    row: usize,
    upper: bool,
}

struct Tableau<T: Real> {
    /// Equality matrix of the dual, `n × (k + n)` (artificials last).
    m: DMatrix<T>,
    rhs: DVector<T>,
    basis: Vec<usize>,
    active_rows: Vec<bool>,
}

impl<T: Real> Tableau<T> {
    fn basis_matrix(&self) -> DMatrix<T> {
        let rows: Vec<usize> = (0..self.m.nrows()).filter(|&i| self.active_rows[i]).collect();
        let mut b = DMatrix::zeros(rows.len(), rows.len());
        for (c, &k) in self.basis.iter().enumerate() {
            for (r, &i) in rows.iter().enumerate() {
                b[(r, c)] = self.m[(i, k)];
            }
        }
        b
    }

    fn col(&self, k: usize) -> DVector<T> {
        DVector::from_iterator(
            self.active_rows.iter().filter(|&&a| a).count(),
            (0..self.m.nrows()).filter(|&i| self.active_rows[i]).map(|i| self.m[(i, k)]),
        )
    }

    fn reduced_rhs(&self) -> DVector<T> {
        DVector::from_iterator(
            self.active_rows.iter().filter(|&&a| a).count(),
            (0..self.m.nrows()).filter(|&i| self.active_rows[i]).map(|i| self.rhs[i]),
        )
    }

    /// Runs simplex iterations for `cost`; columns in `allowed` may enter.
    fn run(&mut self, cost: &[T], allowed: usize, max_pivots: usize, pivots: &mut usize) -> Result<(), LpOutcome<T>> {
        let tol = T::lit(1e-11);
        loop {
            if *pivots >= max_pivots {
                return Err(LpOutcome::Stalled { pivots: *pivots });
            }
            let lu = self.basis_matrix().lu();
            let xb = lu.solve(&self.reduced_rhs()).ok_or(LpOutcome::Stalled { pivots: *pivots })?;
            let cb = DVector::from_iterator(self.basis.len(), self.basis.iter().map(|&k| cost[k]));
            let pi = lu_transpose_solve(&self.basis_matrix(), &cb).ok_or(LpOutcome::Stalled { pivots: *pivots })?;
            let scale = T::one().max(pi.amax());
            let entering = (0..allowed)
                .filter(|k| !self.basis.contains(k))
                .find(|&k| cost[k] - pi.dot(&self.col(k)) < -tol * scale);
            let Some(e) = entering else { return Ok(()) };
            let d = lu.solve(&self.col(e)).ok_or(LpOutcome::Stalled { pivots: *pivots })?;
            // degenerate levels are snapped to zero and near ties go to the
            // smallest basis index, otherwise Bland's rule can cycle on roundoff
            let xtol = T::lit(1e-9) * T::one().max(xb.amax());
            let mut leave: Option<(T, usize)> = None;
            for i in 0..d.len() {
                if d[i] > T::lit(1e-9) {
                    let xi = if xb[i] < xtol { T::zero() } else { xb[i] };
                    let ratio = xi / d[i];
                    leave = match leave {
                        Some((r, j)) => {
                            let band = T::lit(1e-12) * (T::one() + r.abs());
                            if ratio < r - band || ((ratio - r).abs() <= band && self.basis[i] < self.basis[j]) {
                                Some((ratio, i))
                            } else {
                                Some((r, j))
                            }
                        }
                        None => Some((ratio, i)),
                    };
                }
            }
            let Some((_, l)) = leave else { return Err(LpOutcome::Unbounded { pivots: *pivots }) };
            self.basis[l] = e;
            *pivots += 1;
        }
    }
}

fn lu_transpose_solve<T: Real>(b: &DMatrix<T>, rhs: &DVector<T>) -> Option<DVector<T>> {
    b.transpose().lu().solve(rhs)
}

pub(crate) fn solve_lp<T: Real>(prob: &QpProblem<T>, max_pivots: usize) -> LpOutcome<T> {
    let n = prob.num_vars();
    let mut cols = Vec::new();
    for i in 0..prob.num_rows() {
        if prob.ub[i].finite() {
            cols.push(Column { row: i, upper: true });
        }
        if prob.lb[i].finite() {
            cols.push(Column { row: i, upper: false });
        }
    }
    let k = cols.len();
    // dual: min Σ b_k y_k  s.t.  Σ a_k y_k = −g, y ≥ 0
    let mut m = DMatrix::zeros(n, k + n);
    let mut bvec = vec![T::zero(); k + n];
    for (c, col) in cols.iter().enumerate() {
        let s = if col.upper { T::one() } else { -T::one() };
        for j in 0..n {
            m[(j, c)] = s * prob.c[(col.row, j)];
        }
        bvec[c] = if col.upper { prob.ub[col.row] } else { -prob.lb[col.row] };
    }
    let mut rhs = -prob.g.clone();
    let mut flip = vec![false; n];
    for j in 0..n {
        if rhs[j] < T::zero() {
            flip[j] = true;
            rhs[j] = -rhs[j];
            for c in 0..k {
                m[(j, c)] = -m[(j, c)];
            }
        }
        m[(j, k + j)] = T::one();
    }
    let mut tab = Tableau { m, rhs, basis: (k..k + n).collect(), active_rows: vec![true; n] };
    let mut pivots = 0;

    let phase1: Vec<T> = (0..k + n).map(|c| if c >= k { T::one() } else { T::zero() }).collect();
    if let Err(e) = tab.run(&phase1, k, max_pivots, &mut pivots) {
        return e;
    }
    let xb = match tab.basis_matrix().lu().solve(&tab.reduced_rhs()) {
        Some(x) => x,
        None => return LpOutcome::Stalled { pivots },
    };
    let infeas = tab.basis.iter().zip(xb.iter()).filter(|(&c, _)| c >= k).fold(T::zero(), |a, (_, &v)| a + v.abs());
    if infeas > T::lit(1e-9) * T::one().max(tab.rhs.amax()) {
        // dual infeasible: primal is unbounded or empty; a zero objective tells them apart
        let zero = QpProblem { g: DVector::zeros(n), ..prob.clone() };
        return match solve_lp(&zero, max_pivots) {
            LpOutcome::Optimal { .. } => LpOutcome::Unbounded { pivots },
            LpOutcome::Unbounded { .. } => LpOutcome::Infeasible { pivots },
            other => other,
        };
    }
    // drive zero-level artificials out of the basis, dropping redundant rows
    loop {
        let Some(pos) = tab.basis.iter().position(|&c| c >= k) else { break };
        let lu = tab.basis_matrix().lu();
        let mut unit = DVector::zeros(tab.basis.len());
        unit[pos] = T::one();
        let row = match lu_transpose_solve(&tab.basis_matrix(), &unit) {
            Some(r) => r,
            None => return LpOutcome::Stalled { pivots },
        };
        let _ = lu;
        let entering = (0..k).filter(|c| !tab.basis.contains(c)).find(|&c| row.dot(&tab.col(c)).abs() > T::lit(1e-9));
        match entering {
            Some(e) => tab.basis[pos] = e,
            None => {
                let art = tab.basis[pos] - k;
                tab.active_rows[art] = false;
                tab.basis.remove(pos);
            }
        }
    }
    if let Err(e) = tab.run(&bvec, k, max_pivots, &mut pivots) {
        return match e {
            // the dual is unbounded below: the primal is empty
            LpOutcome::Unbounded { pivots } => LpOutcome::Infeasible { pivots },
            other => other,
        };
    }
    let active: Vec<usize> = (0..n).filter(|&i| tab.active_rows[i]).collect();
    let bmat = tab.basis_matrix();
    let cb = DVector::from_iterator(tab.basis.len(), tab.basis.iter().map(|&c| bvec[c]));
    let (Some(pi), Some(yb)) = (lu_transpose_solve(&bmat, &cb), bmat.lu().solve(&tab.reduced_rhs())) else {
        return LpOutcome::Stalled { pivots };
    };
    let mut z = DVector::zeros(n);
    for (r, &j) in active.iter().enumerate() {
        z[j] = if flip[j] { -pi[r] } else { pi[r] };
    }
    let mut y = DVector::zeros(prob.num_rows());
    for (&c, &v) in tab.basis.iter().zip(yb.iter()) {
        let col = &cols[c];
        if col.upper {
            y[col.row] += v;
        } else {
            y[col.row] -= v;
        }
    }
    LpOutcome::Optimal { z, y, pivots }
}
