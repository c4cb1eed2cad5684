//! The communication graph's adjacency tensor (agents x agents x heads) and the
//! quantities defined on it: tube-fiber softmax, normalized tensor rank, the
//! normalized tensor nuclear norm (NTNN) and its subgradient.
//!
//! NTNN is `(1/K) * ||bdiag(A_hat)||_*`. Singular values of a block-diagonal
//! matrix are the union of the blocks' singular values, so every function here
//! works slice by slice and never forms the `NK x NK` matrix.

use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix, SvdResult};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdjacencyError {
    #[error("adjacency tensor needs n_agents >= 1 and n_heads >= 1 (got {n} x {n} x {k})")]
    EmptyTensor { n: usize, k: usize },
    #[error("slice {index} has shape {shape:?}, expected {n}x{n}")]
    SliceShape {
        index: usize,
        shape: (usize, usize),
        n: usize,
    },
    #[error("head index {k} out of range for {heads} heads")]
    HeadOutOfRange { k: usize, heads: usize },
    #[error("tube softmax needs at least two heads (got {0}); single-head tensors skip normalization")]
    SingleHead(usize),
    #[error("row {row} of slice {slice} is not row-stochastic (sum {sum})")]
    NotRowStochastic { slice: usize, row: usize, sum: f64 },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, AdjacencyError>;

/// Tolerance used when validating row sums and tube sums.
pub const STOCHASTIC_TOL: f64 = 1e-9;

/// Which normalization the entries are known to satisfy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    /// Arbitrary finite scores.
    Raw,
    /// Every frontal slice is row-stochastic (softmax over neighbours).
    Attention,
    /// Every tube fiber `A(i, j, :)` is a softmax over heads.
    Tube,
}

/// Dense `N x N x K` tensor stored slice-major: entry `(i, j, k)` lives at
/// `k*N*N + i*N + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyTensor {
    n: usize,
    k: usize,
    data: Vec<f64>,
    normalization: Normalization,
}

impl AdjacencyTensor {
    pub fn zeros(n: usize, k: usize) -> Result<Self> {
        if n == 0 || k == 0 {
            return Err(AdjacencyError::EmptyTensor { n, k });
        }
        Ok(Self {
            n,
            k,
            data: vec![0.0; n * n * k],
            normalization: Normalization::Raw,
        })
    }

    /// Stacks `N x N` frontal slices. The result is tagged [`Normalization::Raw`].
    pub fn from_slices(slices: &[Matrix]) -> Result<Self> {
        let n = slices.first().map_or(0, Matrix::rows);
        let mut t = Self::zeros(n, slices.len())?;
        for (index, s) in slices.iter().enumerate() {
            if s.shape() != (n, n) {
                return Err(AdjacencyError::SliceShape {
                    index,
                    shape: s.shape(),
                    n,
                });
            }
            t.data[index * n * n..(index + 1) * n * n].copy_from_slice(s.as_slice());
        }
        Ok(t)
    }

    /// Stacks slices after checking each is row-stochastic and non-negative.
    pub fn from_attention(slices: &[Matrix]) -> Result<Self> {
        let mut t = Self::from_slices(slices)?;
        for (slice, s) in slices.iter().enumerate() {
            for row in 0..t.n {
                let r = s.row(row);
                let sum: f64 = r.iter().sum();
                if (sum - 1.0).abs() > STOCHASTIC_TOL || r.iter().any(|x| *x < 0.0) {
                    return Err(AdjacencyError::NotRowStochastic { slice, row, sum });
                }
            }
        }
        t.normalization = Normalization::Attention;
        Ok(t)
    }

    pub fn n_agents(&self) -> usize {
        self.n
    }

    pub fn n_heads(&self) -> usize {
        self.k
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[k * self.n * self.n + i * self.n + j]
    }

    /// Writing an entry drops any normalization tag.
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        self.data[k * self.n * self.n + i * self.n + j] = v;
        self.normalization = Normalization::Raw;
    }

    /// Copy of frontal slice `k`.
    pub fn frontal_slice(&self, k: usize) -> Result<Matrix> {
        if k >= self.k {
            return Err(AdjacencyError::HeadOutOfRange { k, heads: self.k });
        }
        let nn = self.n * self.n;
        Ok(Matrix::from_vec_unchecked(self.n, self.n, self.data[k * nn..(k + 1) * nn].to_vec()))
    }

    pub fn slices(&self) -> Vec<Matrix> {
        (0..self.k)
            .map(|k| self.frontal_slice(k).expect("in range"))
            .collect()
    }

    /// Mode-3 fiber `A(i, j, :)`.
    pub fn tube(&self, i: usize, j: usize) -> Vec<f64> {
        (0..self.k).map(|k| self.get(i, j, k)).collect()
    }

    /// Largest deviation of any frontal-slice row sum from 1; `None` if an entry is negative.
    pub fn row_stochastic_error(&self) -> Option<f64> {
        if self.data.iter().any(|x| *x < 0.0) {
            return None;
        }
        let mut worst: f64 = 0.0;
        for k in 0..self.k {
            for i in 0..self.n {
                let s: f64 = (0..self.n).map(|j| self.get(i, j, k)).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        Some(worst)
    }

    /// Largest deviation of any tube sum from 1.
    pub fn tube_sum_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                let s: f64 = (0..self.k).map(|k| self.get(i, j, k)).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        worst
    }

    /// Sub-tensor on the listed agents (rows and columns), all heads kept.
    pub fn restrict(&self, agents: &[usize]) -> Result<Self> {
        let m = agents.len();
        let mut out = Self::zeros(m, self.k)?;
        for k in 0..self.k {
            for (a, &i) in agents.iter().enumerate() {
                for (b, &j) in agents.iter().enumerate() {
                    out.data[k * m * m + a * m + b] = self.get(i, j, k);
                }
            }
        }
        out.normalization = Normalization::Raw;
        Ok(out)
    }
}

/// Softmax along every tube fiber, stabilised by subtracting each tube's maximum.
pub fn tube_softmax(t: &AdjacencyTensor) -> Result<AdjacencyTensor> {
    if t.k < 2 {
        return Err(AdjacencyError::SingleHead(t.k));
    }
    let mut out = t.clone();
    let nn = t.n * t.n;
    let mut buf = vec![0.0; t.k];
    for cell in 0..nn {
        let max = (0..t.k).map(|k| t.data[k * nn + cell]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (k, b) in buf.iter_mut().enumerate() {
            *b = (t.data[k * nn + cell] - max).exp();
            z += *b;
        }
        for (k, b) in buf.iter().enumerate() {
            out.data[k * nn + cell] = b / z;
        }
    }
    out.normalization = Normalization::Tube;
    Ok(out)
}

/// Pulls a gradient on the tube-softmax output back to its input.
///
/// `normalized` is the forward output. Per tube this is the softmax vector-Jacobian
/// product `p * (g - <p, g>)`.
pub fn tube_softmax_backward(normalized: &AdjacencyTensor, grad: &AdjacencyTensor) -> AdjacencyTensor {
    assert_eq!((normalized.n, normalized.k), (grad.n, grad.k), "tube_softmax_backward shape mismatch");
    let nn = normalized.n * normalized.n;
    let mut out = grad.clone();
    out.normalization = Normalization::Raw;
    for cell in 0..nn {
        let inner: f64 = (0..normalized.k)
            .map(|k| normalized.data[k * nn + cell] * grad.data[k * nn + cell])
            .sum();
        for k in 0..normalized.k {
            let idx = k * nn + cell;
            out.data[idx] = normalized.data[idx] * (grad.data[idx] - inner);
        }
    }
    out
}

fn slice_svds(t: &AdjacencyTensor) -> Result<Vec<SvdResult>> {
    (0..t.k)
        .map(|k| Ok(linalg::svd(&t.frontal_slice(k)?)?))
        .collect()
}

/// NTNN of a tensor whose tubes are already normalized (or of a single-head
/// tensor): `(1/K) * sum_k ||A^(k)||_*`.
///
/// Nothing here applies the tube softmax; pass the output of [`tube_softmax`]
/// for the normalized norm, or the attention tensor itself for the
/// un-normalized ablation.
pub fn ntnn(t: &AdjacencyTensor) -> Result<f64> {
    let total: f64 = slice_svds(t)?.iter().map(|s| s.sigma.iter().sum::<f64>()).sum();
    Ok(total / t.k as f64)
}

/// `sum_k rank(A^(k))` with the numerical-rank cutoff of [`linalg::rank_cutoff`].
pub fn normalized_tensor_rank(t: &AdjacencyTensor) -> Result<usize> {
    Ok(slice_svds(t)?.iter().map(SvdResult::rank).sum())
}

/// Subgradient of [`ntnn`] with respect to the entries passed in: slice `k` is
/// `(1/K) * u_k v_k^T`.
pub fn ntnn_subgradient(t: &AdjacencyTensor) -> Result<AdjacencyTensor> {
    Ok(ntnn_with_subgradient(t)?.1)
}

/// [`ntnn`] and [`ntnn_subgradient`] from one set of SVDs. The third value is the
/// smallest gap between consecutive singular values of any slice (including the
/// gap from the last one to zero), which bounds how close the input is to a kink.
pub fn ntnn_with_subgradient(t: &AdjacencyTensor) -> Result<(f64, AdjacencyTensor, f64)> {
    let svds = slice_svds(t)?;
    let scale = 1.0 / t.k as f64;
    let mut grad = AdjacencyTensor::zeros(t.n, t.k)?;
    let mut total = 0.0;
    let mut min_gap = f64::INFINITY;
    let nn = t.n * t.n;
    for (k, s) in svds.iter().enumerate() {
        total += s.sigma.iter().sum::<f64>();
        for w in s.sigma.windows(2) {
            min_gap = min_gap.min(w[0] - w[1]);
        }
        if let Some(last) = s.sigma.last() {
            min_gap = min_gap.min(*last);
        }
        let g = linalg::subgradient_from_svd(s);
        for (dst, src) in grad.data[k * nn..(k + 1) * nn].iter_mut().zip(g.as_slice()) {
            *dst = scale * src;
        }
    }
    Ok((total * scale, grad, min_gap))
}
