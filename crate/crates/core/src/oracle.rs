//! Reference computations that share no code with the SVD path: singular values
//! from a symmetric eigen-solver on `M^T M`, and a brute-force search over the
//! two-agent, two-head attention family with its closed-form norm.
//!
//! Used by the self-test command and the test suites.

use crate::adjacency::{ntnn, AdjacencyTensor};
use crate::linalg::Matrix;

/// Eigenvalues of a symmetric matrix by cyclic two-sided Jacobi rotations, in
/// descending order.
pub fn symmetric_eigenvalues(a: &Matrix) -> Vec<f64> {
    let n = a.rows();
    assert_eq!(n, a.cols(), "symmetric_eigenvalues: square input required");
    let mut m: Vec<Vec<f64>> = (0..n).map(|r| a.row(r).to_vec()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |j| *j != i).map(move |j| (i, j))).map(|(i, j)| m[i][j] * m[i][j]).sum();
        let diag: f64 = (0..n).map(|i| m[i][i] * m[i][i]).sum();
        if off <= 1e-30 * diag.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q] == 0.0 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for row in m.iter_mut() {
                    let (x, y) = (row[p], row[q]);
                    row[p] = c * x - s * y;
                    row[q] = s * x + c * y;
                }
                let (head, tail) = m.split_at_mut(q);
                for (xp, xq) in head[p].iter_mut().zip(tail[0].iter_mut()) {
                    let (x, y) = (*xp, *xq);
                    *xp = c * x - s * y;
                    *xq = s * x + c * y;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m[i][i]).collect();
    eig.sort_by(|x, y| y.total_cmp(x));
    eig
}

/// Singular values as square roots of the eigenvalues of the smaller Gram matrix.
pub fn singular_values_via_gram(m: &Matrix) -> Vec<f64> {
    let t = m.transpose();
    let gram = if m.rows() >= m.cols() { t.matmul(m) } else { m.matmul(&t) }.expect("Gram shapes agree");
    symmetric_eigenvalues(&gram).into_iter().map(|e| e.max(0.0).sqrt()).collect()
}

pub fn nuclear_norm_via_gram(m: &Matrix) -> f64 {
    singular_values_via_gram(m).iter().sum()
}

/// The two-agent, two-head tube-normalized tensor with first-row entries
/// `x0, 1 - x0` on head 1 and `y0, 1 - y0` on head 2; second-row entries are the
/// tube complements, so every tube sums to one.
pub fn appendix_tensor(x0: f64, y0: f64) -> AdjacencyTensor {
    let (x1, y1) = (1.0 - x0, 1.0 - y0);
    let a1 = Matrix::from_rows(&[&[x0, x1], &[y0, y1]]).unwrap();
    let a2 = Matrix::from_rows(&[&[1.0 - x0, 1.0 - x1], &[1.0 - y0, 1.0 - y1]]).unwrap();
    AdjacencyTensor::from_slices(&[a1, a2]).unwrap()
}

/// Closed form of the normalized norm over [`appendix_tensor`]'s family.
pub fn appendix_closed_form(x0: f64, y0: f64) -> f64 {
    let (x1, y1) = (1.0 - x0, 1.0 - y0);
    (x0 * x0 + x1 * x1 + y0 * y0 + y1 * y1 + 2.0 * (y0 - x0).abs()).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSearch {
    pub max_value: f64,
    /// Grid points within `tol` of the maximum.
    pub argmax: Vec<(f64, f64)>,
    /// Largest gap between the implementation and the closed form.
    pub max_closed_form_error: f64,
    pub evaluated: usize,
}

/// Evaluates the implementation on the `[0, 1]^2` grid with step `1 / steps`.
pub fn appendix_grid_search(steps: usize, tol: f64) -> GridSearch {
    let mut values = Vec::with_capacity((steps + 1) * (steps + 1));
    let mut max_err: f64 = 0.0;
    for i in 0..=steps {
        for j in 0..=steps {
            let (x0, y0) = (i as f64 / steps as f64, j as f64 / steps as f64);
            let v = ntnn(&appendix_tensor(x0, y0)).expect("appendix tensor is valid");
            max_err = max_err.max((v - appendix_closed_form(x0, y0)).abs());
            values.push((x0, y0, v));
        }
    }
    let max_value = values.iter().map(|v| v.2).fold(f64::NEG_INFINITY, f64::max);
    GridSearch {
        max_value,
        argmax: values.iter().filter(|v| v.2 >= max_value - tol).map(|v| (v.0, v.1)).collect(),
        max_closed_form_error: max_err,
        evaluated: values.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigenvalues_of_known_matrix() {
        let a = Matrix::from_rows(&[&[2.0, 1.0], &[1.0, 2.0]]).unwrap();
        let e = symmetric_eigenvalues(&a);
        assert!((e[0] - 3.0).abs() < 1e-14 && (e[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn gram_singular_values_of_diagonal() {
        let m = Matrix::from_rows(&[&[3.0, 0.0, 0.0], &[0.0, -4.0, 0.0]]).unwrap();
        let s = singular_values_via_gram(&m);
        assert_eq!(s.len(), 2);
        assert!((s[0] - 4.0).abs() < 1e-14 && (s[1] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn closed_form_values_by_hand() {
        assert!((appendix_closed_form(1.0, 0.0) - 2.0).abs() < 1e-15);
        assert!((appendix_closed_form(0.5, 0.5) - 1.0).abs() < 1e-15);
        assert!((appendix_closed_form(1.0, 1.0) - 2f64.sqrt()).abs() < 1e-15);
    }
}
