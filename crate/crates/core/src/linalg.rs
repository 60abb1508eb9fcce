//! Small linear-algebra kernels: compressed rows, envelope Cholesky, rank and
//! spectral radius helpers.

use nalgebra::{DMatrix, DVector};

use crate::scalar::Real;

/// Compressed sparse row matrix.
#[derive(Debug, Clone)]
pub struct CsrMatrix<T> {
    pub nrows: usize,
    pub ncols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<T>,
}

impl<T: Real> CsrMatrix<T> {
    pub fn from_dense(m: &DMatrix<T>) -> Self {
        let (nrows, ncols) = m.shape();
        let mut row_ptr = Vec::with_capacity(nrows + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for i in 0..nrows {
            for j in 0..ncols {
                let v = m[(i, j)];
                if v != T::zero() {
                    cols.push(j);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        Self { nrows, ncols, row_ptr, cols, vals }
    }

    #[inline]
    pub fn row(&self, i: usize) -> (&[usize], &[T]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.cols[r.clone()], &self.vals[r])
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// `out = A x`
    pub fn mul_vec(&self, x: &[T], out: &mut [T]) {
        for (i, o) in out.iter_mut().enumerate().take(self.nrows) {
            let (c, v) = self.row(i);
            let mut s = T::zero();
            for (&j, &a) in c.iter().zip(v) {
                s += a * x[j];
            }
            *o = s;
        }
    }

    /// `out = Aᵀ y`
    pub fn mul_t_vec(&self, y: &[T], out: &mut [T]) {
        out.iter_mut().for_each(|o| *o = T::zero());
        for (i, &yi) in y.iter().enumerate().take(self.nrows) {
            if yi == T::zero() {
                continue;
            }
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                out[j] += a * yi;
            }
        }
    }

    /// Scale rows by `left` and columns by `right` in place.
    pub fn scale(&mut self, left: &[T], right: &[T]) {
        for i in 0..self.nrows {
            let r = self.row_ptr[i]..self.row_ptr[i + 1];
            for k in r {
                self.vals[k] *= left[i] * right[self.cols[k]];
            }
        }
    }

    /// Infinity norm of each column.
    pub fn col_inf_norms(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.ncols];
        for (&j, &v) in self.cols.iter().zip(&self.vals) {
            out[j] = out[j].max(v.abs());
        }
        out
    }

    pub fn row_inf_norms(&self) -> Vec<T> {
        (0..self.nrows)
            .map(|i| self.row(i).1.iter().fold(T::zero(), |a, v| a.max(v.abs())))
            .collect()
    }
}

/// Symmetric positive definite matrix stored by its lower envelope and
/// factored in place as `L Lᵀ`.
///
/// Row `i` keeps columns `first[i]..=i`; the Cholesky factor never fills
/// outside that profile, so banded and block-banded systems stay cheap.
#[derive(Debug, Clone)]
pub struct EnvelopeCholesky<T> {
    first: Vec<usize>,
    start: Vec<usize>,
    data: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NotPositiveDefinite {
    pub row: usize,
}

impl<T: Real> EnvelopeCholesky<T> {
    /// Allocate a zero matrix with the given envelope.
    pub fn with_profile(first: Vec<usize>) -> Self {
        let mut start = Vec::with_capacity(first.len() + 1);
        let mut off = 0;
        for (i, &f) in first.iter().enumerate() {
            debug_assert!(f <= i);
            start.push(off);
            off += i - f + 1;
        }
        start.push(off);
        Self { first, start, data: vec![T::zero(); off] }
    }

    pub fn dim(&self) -> usize {
        self.first.len()
    }

    /// Add `v` to entry `(i, j)` of the lower triangle (`j <= i`).
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: T) {
        let (i, j) = if j > i { (j, i) } else { (i, j) };
        debug_assert!(j >= self.first[i], "entry outside envelope");
        let k = self.start[i] + (j - self.first[i]);
        self.data[k] += v;
    }

    pub fn clear(&mut self) {
        self.data.iter_mut().for_each(|d| *d = T::zero());
    }

    #[inline]
    fn row(&self, i: usize) -> &[T] {
        &self.data[self.start[i]..self.start[i + 1]]
    }

    /// In-place Cholesky. Fails on the first non-positive pivot.
    pub fn factor(&mut self) -> Result<(), NotPositiveDefinite> {
        let n = self.dim();
        for i in 0..n {
            let fi = self.first[i];
            let si = self.start[i];
            for j in fi..i {
                let fj = self.first[j];
                let sj = self.start[j];
                let k0 = fi.max(fj);
                let mut s = self.data[si + (j - fi)];
                for k in k0..j {
                    s -= self.data[si + (k - fi)] * self.data[sj + (k - fj)];
                }
                let djj = self.data[sj + (j - fj)];
                self.data[si + (j - fi)] = s / djj;
            }
            let mut d = self.data[si + (i - fi)];
            for k in fi..i {
                let l = self.data[si + (k - fi)];
                d -= l * l;
            }
            if !(d > T::zero()) || !d.finite() {
                return Err(NotPositiveDefinite { row: i });
            }
            self.data[si + (i - fi)] = d.sqrt();
        }
        Ok(())
    }

    /// Solve `L Lᵀ x = b` in place. Must be called after [`Self::factor`].
    pub fn solve_in_place(&self, x: &mut [T]) {
        let n = self.dim();
        for i in 0..n {
            let fi = self.first[i];
            let row = self.row(i);
            let mut s = x[i];
            for k in fi..i {
                s -= row[k - fi] * x[k];
            }
            x[i] = s / row[i - fi];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let row = self.row(i);
            x[i] /= row[i - fi];
            let xi = x[i];
            for k in fi..i {
                x[k] -= row[k - fi] * xi;
            }
        }
    }
}

/// Envelope of `P + Cᵀ C` (lower profile, first column per row) for the
/// given sparsity patterns.
pub fn envelope_of<T: Real>(p: &CsrMatrix<T>, c: &CsrMatrix<T>, rows: Option<&[usize]>) -> Vec<usize> {
    let n = p.ncols;
    let mut first: Vec<usize> = (0..n).collect();
    for i in 0..p.nrows {
        let (cols, _) = p.row(i);
        for &j in cols {
            if j < i {
                first[i] = first[i].min(j);
            } else if i < j {
                first[j] = first[j].min(i);
            }
        }
    }
    let mut visit = |cols: &[usize]| {
        if let Some(&lo) = cols.iter().min() {
            for &j in cols {
                first[j] = first[j].min(lo);
            }
        }
    };
    match rows {
        Some(rs) => rs.iter().for_each(|&r| visit(c.row(r).0)),
        None => (0..c.nrows).for_each(|r| visit(c.row(r).0)),
    }
    first
}

/// Numerical rank by Gaussian elimination with partial pivoting.
pub fn rank<T: Real>(m: &DMatrix<T>, tol: T) -> usize {
    let mut a = m.clone();
    let (rows, cols) = a.shape();
    let mut r = 0;
    for c in 0..cols {
        if r == rows {
            break;
        }
        let (piv, val) = (r..rows)
            .map(|i| (i, a[(i, c)].abs()))
            .fold((r, T::zero()), |best, cur| if cur.1 > best.1 { cur } else { best });
        if val <= tol {
            continue;
        }
        a.swap_rows(r, piv);
        for i in (r + 1)..rows {
            let f = a[(i, c)] / a[(r, c)];
            if f != T::zero() {
                for j in c..cols {
                    let v = a[(r, j)];
                    a[(i, j)] -= f * v;
                }
            }
        }
        r += 1;
    }
    r
}

/// Spectral radius via the real Schur form.
pub fn spectral_radius<T: Real>(m: &DMatrix<T>) -> T {
    m.clone()
        .complex_eigenvalues()
        .iter()
        .fold(T::zero(), |acc, e| acc.max((e.re * e.re + e.im * e.im).sqrt()))
}

pub fn inf_norm_vec<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |a, x| a.max(x.abs()))
}

pub fn inf_norm_mat<T: Real>(m: &DMatrix<T>) -> T {
    m.iter().fold(T::zero(), |a, x| a.max(x.abs()))
}

pub fn quad_form<T: Real>(m: &DMatrix<T>, x: &DVector<T>) -> T {
    (x.transpose() * m * x)[(0, 0)]
}
