//! Sparse symmetric and small dense solves.
//!
//! The global system goes through a sparse Cholesky factorisation with a
//! Jacobi-preconditioned conjugate gradient fallback. Patch systems are
//! small and indefinite and use partial-pivoted LU.

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, Side};

use crate::error::LinalgError;

/// Relative residual accepted by the solvers.
pub const RESIDUAL_TOL: f64 = 1e-10;

/// Square or rectangular matrix in compressed row layout.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds the matrix from `(row, col, value)` triplets, summing duplicates.
    pub fn from_triplets(n_rows: usize, n_cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; n_rows + 1];
        for &(r, _, _) in triplets {
            counts[r + 1] += 1;
        }
        for i in 0..n_rows {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut cols = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        for &(r, c, v) in triplets {
            cols[fill[r]] = c;
            vals[fill[r]] = v;
            fill[r] += 1;
        }
        let mut row_ptr = Vec::with_capacity(n_rows + 1);
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        row_ptr.push(0);
        let mut order: Vec<usize> = Vec::new();
        for r in 0..n_rows {
            order.clear();
            order.extend(counts[r]..counts[r + 1]);
            order.sort_by_key(|&k| cols[k]);
            let mut last = usize::MAX;
            for &k in &order {
                if cols[k] == last {
                    *values.last_mut().expect("previous entry") += vals[k];
                } else {
                    col_idx.push(cols[k]);
                    values.push(vals[k]);
                    last = cols[k];
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self { n_rows, n_cols, row_ptr, col_idx, values }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let row = &self.col_idx[self.row_ptr[r]..self.row_ptr[r + 1]];
        row.binary_search(&c).map_or(0.0, |k| self.values[self.row_ptr[r] + k])
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_rows)
            .map(|r| (self.row_ptr[r]..self.row_ptr[r + 1]).map(|k| self.values[k] * x[self.col_idx[k]]).sum())
            .collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n_rows.min(self.n_cols)).map(|i| self.get(i, i)).collect()
    }

    /// Largest `|a_ij - a_ji|` relative to the largest entry.
    pub fn asymmetry(&self) -> f64 {
        let scale = self.values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        let mut worst = 0.0f64;
        for r in 0..self.n_rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                worst = worst.max((self.values[k] - self.get(self.col_idx[k], r)).abs());
            }
        }
        worst / scale
    }
}

fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn relative_residual(a: &SparseMatrix, x: &[f64], b: &[f64]) -> f64 {
    let ax = a.matvec(x);
    let r: Vec<f64> = ax.iter().zip(b).map(|(p, q)| p - q).collect();
    let nb = norm2(b);
    if nb == 0.0 {
        norm2(&r)
    } else {
        norm2(&r) / nb
    }
}

/// Solves a symmetric positive definite system.
pub fn solve_spd(a: &SparseMatrix, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
    if a.n_rows != a.n_cols || b.len() != a.n_rows {
        return Err(LinalgError::DimensionMismatch { rows: a.n_rows, cols: a.n_cols, rhs: b.len() });
    }
    let n = a.n_rows;
    if n == 0 {
        return Ok(Vec::new());
    }
    if let Some(x) = cholesky(a, b) {
        let res = relative_residual(a, &x, b);
        if res <= RESIDUAL_TOL {
            return Ok(x);
        }
        log::debug!("sparse Cholesky residual {res:e}; falling back to CG");
    }
    let (x, iterations) = conjugate_gradient(a, b, 1e-13, 20 * n + 100);
    let residual = relative_residual(a, &x, b);
    if residual <= RESIDUAL_TOL {
        Ok(x)
    } else {
        Err(LinalgError::NoConvergence { residual, iterations })
    }
}

fn cholesky(a: &SparseMatrix, b: &[f64]) -> Option<Vec<f64>> {
    let n = a.n_rows;
    // Symmetric input: the row layout of A is the column layout of A^T = A.
    let triplets: Vec<Triplet<usize, usize, f64>> = (0..n)
        .flat_map(|r| (a.row_ptr[r]..a.row_ptr[r + 1]).map(move |k| (r, k)))
        .filter(|&(r, k)| a.col_idx[k] >= r)
        .map(|(r, k)| Triplet::new(a.col_idx[k], r, a.values[k]))
        .collect();
    let mat = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &triplets).ok()?;
    let llt = mat.sp_cholesky(Side::Lower).ok()?;
    let rhs = Mat::from_fn(n, 1, |i, _| b[i]);
    let x = llt.solve(&rhs);
    let out: Vec<f64> = (0..n).map(|i| x[(i, 0)]).collect();
    out.iter().all(|v| v.is_finite()).then_some(out)
}

/// Jacobi-preconditioned conjugate gradients; returns the iterate and the
/// number of iterations used.
pub fn conjugate_gradient(a: &SparseMatrix, b: &[f64], rtol: f64, max_iter: usize) -> (Vec<f64>, usize) {
    let n = b.len();
    let inv_diag: Vec<f64> = a.diagonal().iter().map(|&d| if d != 0.0 { 1.0 / d } else { 1.0 }).collect();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let target = rtol * norm2(b);
    for it in 0..max_iter {
        if norm2(&r) <= target {
            return (x, it);
        }
        let ap = a.matvec(&p);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 {
            return (x, it);
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    (x, max_iter)
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        Self { n_rows, n_cols, data: vec![0.0; n_rows * n_cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, |r| r.len());
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self { n_rows, n_cols, data }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        self.data.chunks(self.n_cols).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.n_cols, self.n_rows);
        for i in 0..self.n_rows {
            for j in 0..self.n_cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Infinity norm.
    pub fn norm_inf(&self) -> f64 {
        self.data.chunks(self.n_cols.max(1)).map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
    }

    /// Inverse of a small nonsingular square matrix.
    pub fn inverse(&self) -> Result<DenseMatrix, LinalgError> {
        let n = self.n_rows;
        if n != self.n_cols {
            return Err(LinalgError::DimensionMismatch { rows: n, cols: self.n_cols, rhs: n });
        }
        let lu = Mat::from_fn(n, n, |i, j| self[(i, j)]).partial_piv_lu();
        let x = lu.solve(Mat::<f64>::identity(n, n));
        let inv = DenseMatrix { n_rows: n, n_cols: n, data: (0..n * n).map(|k| x[(k / n, k % n)]).collect() };
        let err = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| {
                let v: f64 = (0..n).map(|k| self[(i, k)] * inv[(k, j)]).sum();
                (v - if i == j { 1.0 } else { 0.0 }).abs()
            })
            .fold(0.0, f64::max);
        if !err.is_finite() || err > 1e-8 {
            return Err(LinalgError::Singular { patch: None, residual: err, pivot_ratio: 0.0 });
        }
        Ok(inv)
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.n_cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.n_cols + j]
    }
}

/// Direct solve of a (possibly indefinite) square system by partial-pivoted
/// LU, with a normwise backward-error check. `patch` labels errors.
pub fn solve_dense(m: &DenseMatrix, rhs: &[f64], patch: Option<usize>) -> Result<Vec<f64>, LinalgError> {
    if m.n_rows != m.n_cols || rhs.len() != m.n_rows {
        return Err(LinalgError::DimensionMismatch { rows: m.n_rows, cols: m.n_cols, rhs: rhs.len() });
    }
    let n = m.n_rows;
    if n == 0 {
        return Ok(Vec::new());
    }
    let a = Mat::from_fn(n, n, |i, j| m[(i, j)]);
    let lu = a.partial_piv_lu();
    let u = lu.U();
    let (mut umin, mut umax) = (f64::INFINITY, 0.0f64);
    for i in 0..n {
        let d = u[(i, i)].abs();
        umin = umin.min(d);
        umax = umax.max(d);
    }
    let pivot_ratio = if umax > 0.0 { umin / umax } else { 0.0 };
    let b = Mat::from_fn(n, 1, |i, _| rhs[i]);
    let x = lu.solve(&b);
    let x: Vec<f64> = (0..n).map(|i| x[(i, 0)]).collect();
    let ax = m.matvec(&x);
    let r = ax.iter().zip(rhs).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    let xn = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let bn = rhs.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let denom = m.norm_inf() * xn + bn;
    let residual = if denom > 0.0 { r / denom } else { r };
    if pivot_ratio == 0.0 || !residual.is_finite() || residual > RESIDUAL_TOL || x.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::Singular { patch, residual, pivot_ratio });
    }
    Ok(x)
}

/// Infinity-norm condition number `|A| |A^-1|` from an LU inverse
/// (infinite when a pivot vanishes).
pub fn condition_estimate(m: &DenseMatrix) -> f64 {
    let n = m.n_rows;
    if n == 0 || n != m.n_cols {
        return f64::INFINITY;
    }
    let lu = Mat::from_fn(n, n, |i, j| m[(i, j)]).partial_piv_lu();
    if (0..n).any(|i| lu.U()[(i, i)] == 0.0) {
        return f64::INFINITY;
    }
    let inv = lu.solve(Mat::<f64>::identity(n, n));
    let inv_norm = (0..n).map(|i| (0..n).map(|j| inv[(i, j)].abs()).sum::<f64>()).fold(0.0, f64::max);
    let c = m.norm_inf() * inv_norm;
    if c.is_finite() {
        c
    } else {
        f64::INFINITY
    }
}

/// Solves a saddle-point system given as one square block matrix.
pub fn solve_saddle(m: &DenseMatrix, rhs: &[f64]) -> Result<Vec<f64>, LinalgError> {
    solve_dense(m, rhs, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn tridiag(n: usize) -> SparseMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0));
            if i > 0 {
                t.push((i, i - 1, -1.0));
                t.push((i - 1, i, -1.0));
            }
        }
        SparseMatrix::from_triplets(n, n, &t)
    }

    #[test]
    fn identity_spd() {
        let a = SparseMatrix::from_triplets(3, 3, &[(0, 0, 1.0), (1, 1, 1.0), (2, 2, 1.0)]);
        assert_eq!(solve_spd(&a, &[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn tridiagonal_by_hand() {
        let x = solve_spd(&tridiag(3), &[1.0, 1.0, 1.0]).unwrap();
        for (v, e) in x.iter().zip([1.5, 2.0, 1.5]) {
            assert!((v - e).abs() < 1e-14);
        }
    }

    #[test]
    fn duplicates_are_summed() {
        let a = SparseMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (0, 0, 2.0), (1, 1, 4.0), (0, 1, 1.0)]);
        assert_eq!(a.get(0, 0), 3.0);
        assert_eq!(a.get(0, 1), 1.0);
        assert_eq!(a.get(1, 0), 0.0);
        assert_eq!(a.nnz(), 3);
    }

    #[test]
    fn random_spd_residual() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        let n = 10;
        let g: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut t = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let v: f64 = (0..n).map(|k| g[i * n + k] * g[j * n + k]).sum::<f64>() + if i == j { 0.5 } else { 0.0 };
                t.push((i, j, v));
            }
        }
        let a = SparseMatrix::from_triplets(n, n, &t);
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = solve_spd(&a, &b).unwrap();
        assert!(relative_residual(&a, &x, &b) <= RESIDUAL_TOL);
    }

    #[test]
    fn cg_matches_direct() {
        let a = tridiag(50);
        let b = vec![1.0; 50];
        let (x, _) = conjugate_gradient(&a, &b, 1e-14, 1000);
        let y = solve_spd(&a, &b).unwrap();
        for (p, q) in x.iter().zip(&y) {
            assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn indefinite_two_by_two() {
        // [[2,1],[1,0]] x = (1,1): second row gives x0 = 1, first gives x1 = -1.
        let m = DenseMatrix::from_rows(&[&[2.0, 1.0], &[1.0, 0.0]]);
        let x = solve_saddle(&m, &[1.0, 1.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn kkt_projection() {
        // Projection of c onto x0 + x1 = 0: x = c - mean(c), multiplier = mean(c).
        let m = DenseMatrix::from_rows(&[&[1.0, 0.0, 1.0], &[0.0, 1.0, 1.0], &[1.0, 1.0, 0.0]]);
        let c = [3.0, 1.0];
        let x = solve_saddle(&m, &[c[0], c[1], 0.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] + 1.0).abs() < 1e-14);
        assert!((x[2] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn dense_identity_and_singular() {
        let x = solve_dense(&DenseMatrix::identity(4), &[1.0, 2.0, 3.0, 4.0], None).unwrap();
        assert_eq!(x, vec![1.0, 2.0, 3.0, 4.0]);
        let s = DenseMatrix::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]]);
        match solve_dense(&s, &[1.0, 0.0], Some(17)) {
            Err(LinalgError::Singular { patch: Some(17), .. }) => {}
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn dense_backward_error(seed in 0u64..500, n in 1usize..30) {
            let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
            let mut m = DenseMatrix::zeros(n, n);
            for v in m.data.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            for i in 0..n {
                m[(i, i)] += n as f64;
            }
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = solve_dense(&m, &b, None).unwrap();
            let r = m.matvec(&x);
            for (p, q) in r.iter().zip(&b) {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }
    }
}
