//! Dense real matrices and the singular-value machinery behind the nuclear norm.
//!
//! The SVD is a one-sided (Hestenes) Jacobi iteration with cyclic sweeps. It is
//! accurate to working precision on the small, well-scaled matrices that attention
//! slices produce, and it needs nothing beyond plain `f64` arithmetic.

use std::fmt;

use thiserror::Error;

/// Maximum number of cyclic Jacobi sweeps before giving up.
pub const SVD_MAX_SWEEPS: usize = 30;

/// A rotation is skipped once `|a_p . a_q| <= SVD_ROTATION_TOL * |a_p| |a_q|`.
pub const SVD_ROTATION_TOL: f64 = 1e-12;

/// Relative factor of the numerical-rank cutoff, see [`rank_cutoff`].
pub const RANK_EPS: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("invalid shape {rows}x{cols} for {len} entries")]
    Shape { rows: usize, cols: usize, len: usize },
    #[error("matrix entry ({row}, {col}) is not finite")]
    NonFinite { row: usize, col: usize },
    #[error("SVD of a {rows}x{cols} matrix did not converge within {sweeps} sweeps")]
    NoConvergence {
        rows: usize,
        cols: usize,
        sweeps: usize,
    },
    #[error("block_diag needs at least one block")]
    EmptyBlocks,
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Mismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Row-major dense matrix with at least one row and one column.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting bad shapes and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(LinalgError::Shape {
                rows,
                cols,
                len: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(LinalgError::NonFinite {
                row: pos / cols,
                col: pos % cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Shape is checked, finiteness only under debug assertions.
    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert!(
            rows > 0 && cols > 0 && data.len() == rows * cols,
            "matrix shape {rows}x{cols} does not fit {} entries",
            data.len()
        );
        debug_assert!(
            data.iter().all(|x| x.is_finite()),
            "non-finite entry in {rows}x{cols} matrix"
        );
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(LinalgError::Shape {
                rows: rows.len(),
                cols,
                len: rows.iter().map(|r| r.len()).sum(),
            });
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_vec_unchecked(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self::from_vec_unchecked(rows, cols, vec![value; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, d) in diag.iter().enumerate() {
            m.data[i * n + i] = *d;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::from_vec_unchecked(rows, cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_vec_unchecked(self.rows, self.cols, self.data.iter().map(|x| f(*x)).collect())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|x| x * s)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip(other, "sub", |a, b| a - b)
    }

    fn zip(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(LinalgError::Mismatch {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| f(*a, *b))
            .collect();
        Ok(Matrix::from_vec_unchecked(self.rows, self.cols, data))
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(LinalgError::Mismatch {
                op: "matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let mut out = vec![0.0; self.rows * other.cols];
        matmul_into(&self.data, &other.data, &mut out, self.rows, self.cols, other.cols);
        Ok(Matrix::from_vec_unchecked(self.rows, other.cols, out))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Copy of the submatrix keeping the listed rows and columns, in order.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> Matrix {
        Matrix::from_fn(rows.len(), cols.len(), |r, c| self.get(rows[r], cols[c]))
    }
}

/// `out += a (m x k) * b (k x n)`, all row-major.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// Thin SVD `m = u diag(sigma) v^T` with `k = min(rows, cols)` triplets.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// rows x k, orthonormal columns.
    pub u: Matrix,
    /// Non-increasing, non-negative.
    pub sigma: Vec<f64>,
    /// cols x k, orthonormal columns.
    pub v: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let k = self.sigma.len();
        Matrix::from_fn(self.u.rows(), self.v.rows(), |r, c| {
            (0..k)
                .map(|i| self.u.get(r, i) * self.sigma[i] * self.v.get(c, i))
                .sum()
        })
    }

    /// Number of singular values above [`rank_cutoff`].
    pub fn rank(&self) -> usize {
        let cutoff = rank_cutoff(self.u.rows(), self.v.rows(), self.sigma.first().copied().unwrap_or(0.0));
        self.sigma.iter().filter(|s| **s > cutoff).count()
    }
}

/// Singular values at or below this are treated as zero: `max(rows, cols) * sigma_max * 1e-10`.
pub fn rank_cutoff(rows: usize, cols: usize, sigma_max: f64) -> f64 {
    rows.max(cols) as f64 * sigma_max * RANK_EPS
}

/// Singular value decomposition by cyclic one-sided Jacobi rotations.
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if m.rows >= m.cols {
        jacobi_svd_tall(m)
    } else {
        let t = jacobi_svd_tall(&m.transpose())?;
        Ok(SvdResult {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        })
    }
}

// Works column-wise on a copy of `m` (rows >= cols), orthogonalising column pairs
// until every pair is numerically orthogonal. Column norms are then the singular
// values and the accumulated rotations form v.
fn jacobi_svd_tall(m: &Matrix) -> Result<SvdResult> {
    let (rows, cols) = m.shape();
    // Column-major working copies make the pair updates contiguous.
    let mut a: Vec<Vec<f64>> = (0..cols).map(|c| m.column(c)).collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|c| {
            let mut e = vec![0.0; cols];
            e[c] = 1.0;
            e
        })
        .collect();

    // Columns at rounding level relative to the whole matrix carry no signal;
    // rotating against them only reshuffles noise and never settles.
    let frob2: f64 = a.iter().map(|col| dot(col, col)).sum();
    let negligible = (f64::EPSILON * f64::EPSILON) * frob2;
    let mut converged = cols == 1;
    for _sweep in 0..SVD_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..cols - 1 {
            for q in p + 1..cols {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if gamma == 0.0 || alpha.min(beta) <= negligible || gamma.abs() <= SVD_ROTATION_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = a.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
                let (lo, hi) = v.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(LinalgError::NoConvergence {
            rows,
            cols,
            sweeps: SVD_MAX_SWEEPS,
        });
    }

    let mut sigma: Vec<f64> = a.iter().map(|col| dot(col, col).sqrt()).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]).then(i.cmp(&j)));
    let sigma_max = order.first().map_or(0.0, |&i| sigma[i]);
    let tiny = rank_cutoff(rows, cols, sigma_max).max(f64::MIN_POSITIVE);

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut v_cols: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut sorted = Vec::with_capacity(cols);
    let mut deficient = Vec::new();
    for &i in &order {
        let s = sigma[i];
        if s > tiny {
            u_cols.push(a[i].iter().map(|x| x / s).collect());
        } else {
            deficient.push(u_cols.len());
            u_cols.push(vec![0.0; rows]);
        }
        v_cols.push(v[i].clone());
        sorted.push(s);
    }
    // Null directions get an orthonormal completion so u keeps orthonormal columns.
    let mut filled: Vec<bool> = (0..cols).map(|j| !deficient.contains(&j)).collect();
    for &slot in &deficient {
        u_cols[slot] = complete_basis(&u_cols, &filled, rows);
        filled[slot] = true;
    }
    sigma = sorted;

    let u = Matrix::from_fn(rows, cols, |r, c| u_cols[c][r]);
    let vm = Matrix::from_fn(cols, cols, |r, c| v_cols[c][r]);
    Ok(SvdResult { u, sigma, v: vm })
}

fn complete_basis(cols: &[Vec<f64>], filled: &[bool], rows: usize) -> Vec<f64> {
    let mut best = vec![0.0; rows];
    let mut best_norm = 0.0;
    for e in 0..rows {
        let mut cand = vec![0.0; rows];
        cand[e] = 1.0;
        // Two Gram-Schmidt passes for stability.
        for _ in 0..2 {
            for col in cols.iter().zip(filled).filter(|(_, f)| **f).map(|(c, _)| c) {
                let d = dot(&cand, col);
                for (x, y) in cand.iter_mut().zip(col) {
                    *x -= d * y;
                }
            }
        }
        let n = dot(&cand, &cand).sqrt();
        if n > best_norm {
            best_norm = n;
            best = cand;
        }
        if n > 0.5 {
            break;
        }
    }
    for x in best.iter_mut() {
        *x /= best_norm;
    }
    best
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn rotate(p: &mut [f64], q: &mut [f64], c: f64, s: f64) {
    for (x, y) in p.iter_mut().zip(q.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Sum of singular values.
pub fn nuclear_norm(m: &Matrix) -> Result<f64> {
    Ok(svd(m)?.sigma.iter().sum())
}

/// Numerical rank under [`rank_cutoff`].
pub fn numerical_rank(m: &Matrix) -> Result<usize> {
    Ok(svd(m)?.rank())
}

/// `u_r v_r^T` over the singular triplets above the rank cutoff.
///
/// Where singular values repeat or vanish the nuclear norm has no gradient and
/// this is one element of the subdifferential, whichever one the SVD lands on.
pub fn nuclear_norm_subgradient(m: &Matrix) -> Result<Matrix> {
    let s = svd(m)?;
    Ok(subgradient_from_svd(&s))
}

pub(crate) fn subgradient_from_svd(s: &SvdResult) -> Matrix {
    let r = s.rank();
    let (rows, cols) = (s.u.rows(), s.v.rows());
    Matrix::from_fn(rows, cols, |i, j| (0..r).map(|t| s.u.get(i, t) * s.v.get(j, t)).sum())
}

/// Block-diagonal assembly, blocks in list order, zeros elsewhere.
pub fn block_diag(blocks: &[Matrix]) -> Result<Matrix> {
    if blocks.is_empty() {
        return Err(LinalgError::EmptyBlocks);
    }
    let rows: usize = blocks.iter().map(Matrix::rows).sum();
    let cols: usize = blocks.iter().map(Matrix::cols).sum();
    let mut out = Matrix::zeros(rows, cols);
    let (mut r0, mut c0) = (0, 0);
    for b in blocks {
        for r in 0..b.rows() {
            for c in 0..b.cols() {
                out.set(r0 + r, c0 + c, b.get(r, c));
            }
        }
        r0 += b.rows();
        c0 += b.cols();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn orthonormal_cols(m: &Matrix) -> f64 {
        let g = m.transpose().matmul(m).unwrap();
        g.max_abs_diff(&Matrix::identity(m.cols()))
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(matches!(Matrix::new(0, 2, vec![]), Err(LinalgError::Shape { .. })));
        assert!(matches!(Matrix::new(2, 2, vec![1.0; 3]), Err(LinalgError::Shape { .. })));
        assert_eq!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(LinalgError::NonFinite { row: 0, col: 1 })
        );
    }

    #[test]
    fn identity_singular_values() {
        let s = svd(&Matrix::identity(2)).unwrap();
        assert_eq!(s.sigma, vec![1.0, 1.0]);
    }

    #[test]
    fn rank_one_half_matrix() {
        let m = Matrix::filled(2, 2, 0.5);
        let s = svd(&m).unwrap();
        assert!((s.sigma[0] - 1.0).abs() < 1e-14);
        assert!(s.sigma[1].abs() < 1e-14);
        assert!(orthonormal_cols(&s.u) < 1e-12);
        assert!((nuclear_norm(&m).unwrap() - 1.0).abs() < 1e-14);
        assert_eq!(numerical_rank(&m).unwrap(), 1);
    }

    #[test]
    fn nuclear_norm_identity_is_dimension() {
        for n in 1..=8 {
            assert!((nuclear_norm(&Matrix::identity(n)).unwrap() - n as f64).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_matrix_has_zero_norm_and_orthonormal_factors() {
        let s = svd(&Matrix::zeros(3, 2)).unwrap();
        assert_eq!(s.sigma, vec![0.0, 0.0]);
        assert!(orthonormal_cols(&s.u) < 1e-12);
        assert!(orthonormal_cols(&s.v) < 1e-12);
        assert_eq!(nuclear_norm_subgradient(&Matrix::zeros(2, 2)).unwrap(), Matrix::zeros(2, 2));
    }

    #[test]
    fn rectangular_both_orientations() {
        for (r, c) in [(5, 3), (3, 5), (1, 4), (4, 1)] {
            let m = random(r, c, (r * 10 + c) as u64);
            let s = svd(&m).unwrap();
            assert_eq!(s.u.shape(), (r, r.min(c)));
            assert_eq!(s.v.shape(), (c, r.min(c)));
            assert!(s.reconstruct().sub(&m).unwrap().frobenius_norm() <= 1e-10 * m.frobenius_norm().max(1.0));
            assert!(orthonormal_cols(&s.u) < 1e-10);
            assert!(orthonormal_cols(&s.v) < 1e-10);
            assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn stacked_row_stochastic_closed_form() {
        // x = 1, y = 0 gives the identity.
        let m = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        assert!((nuclear_norm(&m).unwrap() - 2.0).abs() < 1e-14);
        for (x, y) in [(0.3, 0.8), (0.9, 0.1), (0.5, 0.5), (0.0, 1.0)] {
            let m = Matrix::from_rows(&[&[x, 1.0 - x], &[y, 1.0 - y]]).unwrap();
            let closed = (x * x + (1.0f64 - x).powi(2) + y * y + (1.0f64 - y).powi(2) + 2.0 * (x - y).abs()).sqrt();
            assert!((nuclear_norm(&m).unwrap() - closed).abs() < 1e-12, "x={x} y={y}");
        }
    }

    #[test]
    fn subgradient_of_positive_diagonal_is_identity() {
        assert_eq!(nuclear_norm_subgradient(&Matrix::identity(2)).unwrap().max_abs_diff(&Matrix::identity(2)), 0.0);
        let g = nuclear_norm_subgradient(&Matrix::from_diag(&[3.0, 2.0])).unwrap();
        assert!(g.max_abs_diff(&Matrix::identity(2)) < 1e-15);
    }

    #[test]
    fn subgradient_matches_finite_differences() {
        let mut checked = 0;
        for seed in 0..50u64 {
            let m = random(4, 4, 1000 + seed);
            let s = svd(&m).unwrap();
            let min_gap = s
                .sigma
                .windows(2)
                .map(|w| w[0] - w[1])
                .chain(std::iter::once(*s.sigma.last().unwrap()))
                .fold(f64::INFINITY, f64::min);
            if min_gap < 0.1 {
                continue;
            }
            let g = nuclear_norm_subgradient(&m).unwrap();
            let h = 1e-5;
            for i in 0..4 {
                for j in 0..4 {
                    let mut p = m.clone();
                    p.set(i, j, m.get(i, j) + h);
                    let mut q = m.clone();
                    q.set(i, j, m.get(i, j) - h);
                    let fd = (nuclear_norm(&p).unwrap() - nuclear_norm(&q).unwrap()) / (2.0 * h);
                    let rel = (fd - g.get(i, j)).abs() / fd.abs().max(g.get(i, j).abs()).max(1e-3);
                    assert!(rel <= 1e-4, "seed {seed} ({i},{j}): fd {fd} vs {}", g.get(i, j));
                }
            }
            checked += 1;
        }
        assert!(checked >= 3, "too few well-separated samples: {checked}");
    }

    #[test]
    fn block_diag_layout_and_additivity() {
        let a = random(2, 2, 1);
        let b = random(2, 2, 2);
        assert_eq!(block_diag(std::slice::from_ref(&a)).unwrap(), a);
        let d = block_diag(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(d.shape(), (4, 4));
        for r in 0..4 {
            for c in 0..4 {
                if (r < 2) != (c < 2) {
                    assert_eq!(d.get(r, c), 0.0);
                }
            }
        }
        let sum = nuclear_norm(&a).unwrap() + nuclear_norm(&b).unwrap();
        assert!((nuclear_norm(&d).unwrap() - sum).abs() < 1e-9);
        assert_eq!(block_diag(&[]), Err(LinalgError::EmptyBlocks));
    }

    #[test]
    fn deterministic() {
        let m = random(5, 5, 9);
        let a = svd(&m).unwrap();
        let b = svd(&m).unwrap();
        assert_eq!(a.sigma, b.sigma);
        assert_eq!(a.u, b.u);
    }
}
