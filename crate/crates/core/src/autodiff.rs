//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] is an arena of nodes appended in evaluation order, so the arena
//! order is already a topological order and [`Tape::backward`] is a single
//! reverse scan. [`Value`] is a copyable handle into that arena.
//!
//! ```
//! use ntnnr_core::autodiff::Tape;
//! use ntnnr_core::linalg::Matrix;
//!
//! let mut tape = Tape::new();
//! let w = tape.param(Matrix::from_rows(&[&[2.0], &[3.0]]).unwrap());
//! let x = tape.constant(Matrix::from_rows(&[&[1.0, 4.0]]).unwrap());
//! let y = tape.matmul(x, w);
//! let loss = tape.sum(y);
//! tape.backward(loss);
//! assert_eq!(tape.scalar(loss), 14.0);
//! assert_eq!(tape.grad(w).unwrap().as_slice(), &[1.0, 4.0]);
//! ```

use crate::adjacency::{self, AdjacencyError, AdjacencyTensor};
use crate::linalg::{matmul_into, Matrix};

/// Negative slope of the leaky ReLU used in attention scoring unless configured otherwise.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

/// Inputs whose singular values sit closer than this to a collision (or to zero)
/// are excluded from finite-difference checks.
pub const SV_COLLISION_RADIUS: f64 = 1e-3;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Value(usize);

impl Value {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Mul(usize, usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    Log(usize),
    Abs(usize),
    Square(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    Sum(usize),
    Mean(usize),
    GatherRows(usize, Vec<usize>),
    Pick(usize, Vec<usize>),
    PairSum(usize, usize),
    Reshape(usize),
    /// Scalar with a precomputed gradient for each input.
    Scalar(Vec<(usize, Matrix)>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Matrix>>,
    track_kinks: bool,
    kink_signs: Vec<i8>,
    min_sv_gap: f64,
}

impl Tape {
    pub fn new() -> Self {
        Self {
            min_sv_gap: f64::INFINITY,
            ..Default::default()
        }
    }

    /// Records the sign of every input to a non-smooth elementwise op, for [`grad_check`].
    pub fn with_kink_tracking() -> Self {
        Self {
            track_kinks: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Value {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Value(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, m: Matrix) -> Value {
        self.push(m, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, m: Matrix) -> Value {
        self.push(m, Op::Leaf, false)
    }

    pub fn value(&self, v: Value) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Value) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Value) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on a {:?} value", m.shape());
        m.get(0, 0)
    }

    pub fn requires_grad(&self, v: Value) -> bool {
        self.rg(v.0)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Value) -> Option<&Matrix> {
        self.leaf_grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Smallest singular-value gap seen by any NTNN node so far.
    pub fn min_singular_gap(&self) -> f64 {
        self.min_sv_gap
    }

    pub(crate) fn kink_signs(&self) -> &[i8] {
        &self.kink_signs
    }

    fn unary(&mut self, a: Value, op: Op, f: impl Fn(f64) -> f64) -> Value {
        let out = self.value(a).map(f);
        let rg = self.rg(a.0);
        self.push(out, op, rg)
    }

    fn check_same(&self, op: &str, a: Value, b: Value) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "{op}: shape mismatch {sa:?} vs {sb:?}");
    }

    pub fn matmul(&mut self, a: Value, b: Value) -> Value {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!(ma.cols(), mb.rows(), "matmul: shape mismatch {:?} x {:?}", ma.shape(), mb.shape());
        let mut out = vec![0.0; ma.rows() * mb.cols()];
        matmul_into(ma.as_slice(), mb.as_slice(), &mut out, ma.rows(), ma.cols(), mb.cols());
        let m = Matrix::from_vec_unchecked(ma.rows(), mb.cols(), out);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(m, Op::MatMul(a.0, b.0), rg)
    }

    pub fn add(&mut self, a: Value, b: Value) -> Value {
        self.check_same("add", a, b);
        let m = self.value(a).add(self.value(b)).expect("checked");
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(m, Op::Add(a.0, b.0), rg)
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Value {
        self.check_same("sub", a, b);
        let m = self.value(a).sub(self.value(b)).expect("checked");
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(m, Op::Sub(a.0, b.0), rg)
    }

    /// `a (n x m) + row (1 x m)` broadcast over rows.
    pub fn add_row(&mut self, a: Value, row: Value) -> Value {
        let (ma, mr) = (self.value(a), self.value(row));
        assert!(
            mr.rows() == 1 && mr.cols() == ma.cols(),
            "add_row: cannot broadcast {:?} onto {:?}",
            mr.shape(),
            ma.shape()
        );
        let cols = ma.cols();
        let data = ma
            .as_slice()
            .iter()
            .enumerate()
            .map(|(i, x)| x + mr.as_slice()[i % cols])
            .collect();
        let m = Matrix::from_vec_unchecked(ma.rows(), cols, data);
        let rg = self.rg(a.0) || self.rg(row.0);
        self.push(m, Op::AddRow(a.0, row.0), rg)
    }

    pub fn scale(&mut self, a: Value, s: f64) -> Value {
        self.unary(a, Op::Scale(a.0, s), |x| x * s)
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Value {
        self.check_same("mul", a, b);
        let (ma, mb) = (self.value(a), self.value(b));
        let data = ma.as_slice().iter().zip(mb.as_slice()).map(|(x, y)| x * y).collect();
        let m = Matrix::from_vec_unchecked(ma.rows(), ma.cols(), data);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(m, Op::Mul(a.0, b.0), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Value]) -> Value {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.cols(), cols, "concat_rows: column mismatch {} vs {cols}", m.cols());
            data.extend_from_slice(m.as_slice());
            rows += m.rows();
        }
        let rg = parts.iter().any(|p| self.rg(p.0));
        self.push(
            Matrix::from_vec_unchecked(rows, cols, data),
            Op::ConcatRows(parts.iter().map(|p| p.0).collect()),
            rg,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Value]) -> Value {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let rows = self.shape(parts[0]).0;
        for p in parts {
            assert_eq!(self.shape(*p).0, rows, "concat_cols: row mismatch {:?}", self.shape(*p));
        }
        let cols: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let rg = parts.iter().any(|p| self.rg(p.0));
        self.push(
            Matrix::from_vec_unchecked(rows, cols, data),
            Op::ConcatCols(parts.iter().map(|p| p.0).collect()),
            rg,
        )
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Value, start: usize, end: usize) -> Value {
        let m = self.value(a);
        assert!(start < end && end <= m.cols(), "slice_cols: {start}..{end} of {:?}", m.shape());
        let out = Matrix::from_fn(m.rows(), end - start, |r, c| m.get(r, start + c));
        let rg = self.rg(a.0);
        self.push(out, Op::SliceCols(a.0, start), rg)
    }

    pub fn leaky_relu(&mut self, a: Value, slope: f64) -> Value {
        self.record_kinks(a);
        self.unary(a, Op::LeakyRelu(a.0, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn sigmoid(&mut self, a: Value) -> Value {
        self.unary(a, Op::Sigmoid(a.0), |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn tanh(&mut self, a: Value) -> Value {
        self.unary(a, Op::Tanh(a.0), f64::tanh)
    }

    pub fn log(&mut self, a: Value) -> Value {
        self.unary(a, Op::Log(a.0), f64::ln)
    }

    pub fn abs(&mut self, a: Value) -> Value {
        self.record_kinks(a);
        self.unary(a, Op::Abs(a.0), f64::abs)
    }

    pub fn square(&mut self, a: Value) -> Value {
        self.unary(a, Op::Square(a.0), |x| x * x)
    }

    fn record_kinks(&mut self, a: Value) {
        if self.track_kinks {
            let signs: Vec<i8> = self.nodes[a.0].value.as_slice().iter().map(|x| x.partial_cmp(&0.0).map_or(0, |o| o as i8)).collect();
            self.kink_signs.extend(signs);
        }
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: Value) -> Value {
        let m = self.value(a);
        let out = softmax_rows_masked(m, None);
        let rg = self.rg(a.0);
        self.push(out, Op::SoftmaxRows(a.0), rg)
    }

    /// Row-wise softmax restricted to entries where `allowed[r * cols + c]`; the
    /// rest come out exactly zero. Every row needs at least one allowed entry.
    pub fn masked_softmax_rows(&mut self, a: Value, allowed: &[bool]) -> Value {
        let m = self.value(a);
        assert_eq!(allowed.len(), m.len(), "masked_softmax_rows: mask length {} for {:?}", allowed.len(), m.shape());
        let out = softmax_rows_masked(m, Some(allowed));
        let rg = self.rg(a.0);
        // Backward only needs the output, where masked entries are already zero.
        self.push(out, Op::SoftmaxRows(a.0), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Value) -> Value {
        let m = self.value(a);
        let cols = m.cols();
        let mut data = Vec::with_capacity(m.len());
        for r in 0..m.rows() {
            let row = m.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|x| x - lse));
        }
        let out = Matrix::from_vec_unchecked(m.rows(), cols, data);
        let rg = self.rg(a.0);
        self.push(out, Op::LogSoftmaxRows(a.0), rg)
    }

    pub fn sum(&mut self, a: Value) -> Value {
        let s = self.value(a).as_slice().iter().sum();
        let rg = self.rg(a.0);
        self.push(Matrix::from_vec_unchecked(1, 1, vec![s]), Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Value) -> Value {
        let m = self.value(a);
        let s = m.as_slice().iter().sum::<f64>() / m.len() as f64;
        let rg = self.rg(a.0);
        self.push(Matrix::from_vec_unchecked(1, 1, vec![s]), Op::Mean(a.0), rg)
    }

    /// Rows of `a` in the listed order (repeats allowed).
    pub fn gather_rows(&mut self, a: Value, rows: &[usize]) -> Value {
        let m = self.value(a);
        assert!(!rows.is_empty(), "gather_rows: empty index list");
        let mut data = Vec::with_capacity(rows.len() * m.cols());
        for &r in rows {
            assert!(r < m.rows(), "gather_rows: row {r} of {:?}", m.shape());
            data.extend_from_slice(m.row(r));
        }
        let out = Matrix::from_vec_unchecked(rows.len(), m.cols(), data);
        let rg = self.rg(a.0);
        self.push(out, Op::GatherRows(a.0, rows.to_vec()), rg)
    }

    /// `out[r] = a[r, cols[r]]`, an `n x 1` column.
    pub fn pick(&mut self, a: Value, cols: &[usize]) -> Value {
        let m = self.value(a);
        assert_eq!(cols.len(), m.rows(), "pick: {} indices for {:?}", cols.len(), m.shape());
        let data = cols
            .iter()
            .enumerate()
            .map(|(r, &c)| {
                assert!(c < m.cols(), "pick: column {c} of {:?}", m.shape());
                m.get(r, c)
            })
            .collect();
        let out = Matrix::from_vec_unchecked(m.rows(), 1, data);
        let rg = self.rg(a.0);
        self.push(out, Op::Pick(a.0, cols.to_vec()), rg)
    }

    /// All pairwise row sums: row `i * m + j` of the `(n*m) x d` output is `p[i] + q[j]`.
    pub fn pair_sum(&mut self, p: Value, q: Value) -> Value {
        let (mp, mq) = (self.value(p), self.value(q));
        assert_eq!(mp.cols(), mq.cols(), "pair_sum: width mismatch {:?} vs {:?}", mp.shape(), mq.shape());
        let d = mp.cols();
        let mut data = Vec::with_capacity(mp.rows() * mq.rows() * d);
        for i in 0..mp.rows() {
            for j in 0..mq.rows() {
                data.extend(mp.row(i).iter().zip(mq.row(j)).map(|(a, b)| a + b));
            }
        }
        let out = Matrix::from_vec_unchecked(mp.rows() * mq.rows(), d, data);
        let rg = self.rg(p.0) || self.rg(q.0);
        self.push(out, Op::PairSum(p.0, q.0), rg)
    }

    /// Same row-major data, new shape.
    pub fn reshape(&mut self, a: Value, rows: usize, cols: usize) -> Value {
        let m = self.value(a);
        assert_eq!(rows * cols, m.len(), "reshape: {:?} into {rows}x{cols}", m.shape());
        let out = Matrix::from_vec_unchecked(rows, cols, m.as_slice().to_vec());
        let rg = self.rg(a.0);
        self.push(out, Op::Reshape(a.0), rg)
    }

    /// One LSTM step for a batch of rows. Gate columns are ordered
    /// input, forget, candidate, output, each `hidden` wide.
    pub fn lstm_cell(&mut self, x: Value, h: Value, c: Value, gates: &LstmGates) -> (Value, Value) {
        let hidden = self.shape(c).1;
        assert_eq!(self.shape(gates.w_x).1, 4 * hidden, "lstm_cell: w_x must have 4*hidden columns");
        let xw = self.matmul(x, gates.w_x);
        let hw = self.matmul(h, gates.w_h);
        let pre = self.add(xw, hw);
        let pre = self.add_row(pre, gates.bias);
        let i = self.slice_cols(pre, 0, hidden);
        let i = self.sigmoid(i);
        let f = self.slice_cols(pre, hidden, 2 * hidden);
        let f = self.sigmoid(f);
        let g = self.slice_cols(pre, 2 * hidden, 3 * hidden);
        let g = self.tanh(g);
        let o = self.slice_cols(pre, 3 * hidden, 4 * hidden);
        let o = self.sigmoid(o);
        let keep = self.mul(f, c);
        let write = self.mul(i, g);
        let c_new = self.add(keep, write);
        let squashed = self.tanh(c_new);
        let h_new = self.mul(o, squashed);
        (h_new, c_new)
    }

    /// NTNN of the tensor whose frontal slices are `slices` (each `N x N`), as a
    /// differentiable scalar.
    ///
    /// With `normalize` and at least two slices the tube softmax is applied first;
    /// otherwise the slices are used as they are. `agents`, when given, restricts
    /// rows and columns to those agents; the rest receive zero gradient.
    pub fn ntnn(&mut self, slices: &[Value], agents: Option<&[usize]>, normalize: bool) -> Result<Value, AdjacencyError> {
        let mats: Vec<Matrix> = slices.iter().map(|s| self.value(*s).clone()).collect();
        let full = AdjacencyTensor::from_slices(&mats)?;
        let n = full.n_agents();
        let all: Vec<usize>;
        let agents = match agents {
            Some(a) => a,
            None => {
                all = (0..n).collect();
                &all
            }
        };
        let t = full.restrict(agents)?;
        let (value, grad) = if normalize && t.n_heads() >= 2 {
            let normalized = adjacency::tube_softmax(&t)?;
            let (v, g, gap) = adjacency::ntnn_with_subgradient(&normalized)?;
            self.min_sv_gap = self.min_sv_gap.min(gap);
            (v, adjacency::tube_softmax_backward(&normalized, &g))
        } else {
            let (v, g, gap) = adjacency::ntnn_with_subgradient(&t)?;
            self.min_sv_gap = self.min_sv_gap.min(gap);
            (v, g)
        };
        let rg = slices.iter().any(|s| self.rg(s.0));
        let mut grads = Vec::new();
        if rg {
            for (k, s) in slices.iter().enumerate() {
                let mut g = Matrix::zeros(n, n);
                for (a, &i) in agents.iter().enumerate() {
                    for (b, &j) in agents.iter().enumerate() {
                        g.set(i, j, grad.get(a, b, k));
                    }
                }
                grads.push((s.0, g));
            }
        }
        Ok(self.push(Matrix::from_vec_unchecked(1, 1, vec![value]), Op::Scalar(grads), rg))
    }

    /// Accumulates `d loss / d leaf` into every gradient-requiring leaf.
    /// Repeated calls add up until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Value) {
        assert_eq!(self.shape(loss), (1, 1), "backward: loss must be scalar, got {:?}", self.shape(loss));
        let Tape { nodes, leaf_grads, .. } = self;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let y = &node.value;
            let mut send = |parent: usize, contrib: Vec<f64>| {
                if !nodes[parent].requires_grad {
                    return;
                }
                match &mut grads[parent] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {
                    let gm = Matrix::from_vec_unchecked(y.rows(), y.cols(), g);
                    match &mut leaf_grads[idx] {
                        Some(acc) => acc.as_mut_slice().iter_mut().zip(gm.as_slice()).for_each(|(a, c)| *a += c),
                        slot @ None => *slot = Some(gm),
                    }
                }
                Op::MatMul(a, b) => {
                    let (ma, mb) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k, n) = (ma.rows(), ma.cols(), mb.cols());
                    if nodes[*a].requires_grad {
                        let mut da = vec![0.0; m * k];
                        let bt = mb.transpose();
                        matmul_into(&g, bt.as_slice(), &mut da, m, n, k);
                        send(*a, da);
                    }
                    if nodes[*b].requires_grad {
                        let mut db = vec![0.0; k * n];
                        let at = ma.transpose();
                        matmul_into(at.as_slice(), &g, &mut db, k, m, n);
                        send(*b, db);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.iter().map(|x| -x).collect());
                    send(*a, g);
                }
                Op::AddRow(a, r) => {
                    let cols = y.cols();
                    let mut dr = vec![0.0; cols];
                    for (i, x) in g.iter().enumerate() {
                        dr[i % cols] += x;
                    }
                    send(*r, dr);
                    send(*a, g);
                }
                Op::Scale(a, s) => send(*a, g.iter().map(|x| x * s).collect()),
                Op::Mul(a, b) => {
                    let (va, vb) = (nodes[*a].value.as_slice(), nodes[*b].value.as_slice());
                    send(*a, g.iter().zip(vb).map(|(x, y)| x * y).collect());
                    send(*b, g.iter().zip(va).map(|(x, y)| x * y).collect());
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = nodes[*p].value.len();
                        send(*p, g[off..off + len].to_vec());
                        off += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = y.cols();
                    let mut off = 0;
                    for p in parts {
                        let (rows, cols) = nodes[*p].value.shape();
                        let mut d = Vec::with_capacity(rows * cols);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + off..r * total + off + cols]);
                        }
                        send(*p, d);
                        off += cols;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = nodes[*a].value.shape();
                    let w = y.cols();
                    let mut d = vec![0.0; rows * cols];
                    for r in 0..rows {
                        d[r * cols + start..r * cols + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                    }
                    send(*a, d);
                }
                Op::LeakyRelu(a, slope) => {
                    let x = nodes[*a].value.as_slice();
                    send(*a, g.iter().zip(x).map(|(d, x)| if *x > 0.0 { *d } else { d * slope }).collect());
                }
                Op::Sigmoid(a) => send(*a, g.iter().zip(y.as_slice()).map(|(d, s)| d * s * (1.0 - s)).collect()),
                Op::Tanh(a) => send(*a, g.iter().zip(y.as_slice()).map(|(d, t)| d * (1.0 - t * t)).collect()),
                Op::Log(a) => {
                    let x = nodes[*a].value.as_slice();
                    send(*a, g.iter().zip(x).map(|(d, x)| d / x).collect());
                }
                Op::Abs(a) => {
                    let x = nodes[*a].value.as_slice();
                    send(*a, g.iter().zip(x).map(|(d, x)| if *x > 0.0 { *d } else if *x < 0.0 { -d } else { 0.0 }).collect());
                }
                Op::Square(a) => {
                    let x = nodes[*a].value.as_slice();
                    send(*a, g.iter().zip(x).map(|(d, x)| 2.0 * d * x).collect());
                }
                Op::SoftmaxRows(a) => {
                    let cols = y.cols();
                    let p = y.as_slice();
                    let mut d = vec![0.0; p.len()];
                    for r in 0..y.rows() {
                        let span = r * cols..(r + 1) * cols;
                        let inner: f64 = p[span.clone()].iter().zip(&g[span.clone()]).map(|(a, b)| a * b).sum();
                        for i in span {
                            d[i] = p[i] * (g[i] - inner);
                        }
                    }
                    send(*a, d);
                }
                Op::LogSoftmaxRows(a) => {
                    let cols = y.cols();
                    let ls = y.as_slice();
                    let mut d = vec![0.0; ls.len()];
                    for r in 0..y.rows() {
                        let span = r * cols..(r + 1) * cols;
                        let total: f64 = g[span.clone()].iter().sum();
                        for i in span {
                            d[i] = g[i] - ls[i].exp() * total;
                        }
                    }
                    send(*a, d);
                }
                Op::Sum(a) => send(*a, vec![g[0]; nodes[*a].value.len()]),
                Op::Mean(a) => {
                    let len = nodes[*a].value.len();
                    send(*a, vec![g[0] / len as f64; len]);
                }
                Op::GatherRows(a, rows) => {
                    let (r0, cols) = nodes[*a].value.shape();
                    let mut d = vec![0.0; r0 * cols];
                    for (out_r, &src) in rows.iter().enumerate() {
                        for c in 0..cols {
                            d[src * cols + c] += g[out_r * cols + c];
                        }
                    }
                    send(*a, d);
                }
                Op::Pick(a, picks) => {
                    let (rows, cols) = nodes[*a].value.shape();
                    let mut d = vec![0.0; rows * cols];
                    for (r, &c) in picks.iter().enumerate() {
                        d[r * cols + c] += g[r];
                    }
                    send(*a, d);
                }
                Op::PairSum(p, q) => {
                    let (np, d) = nodes[*p].value.shape();
                    let nq = nodes[*q].value.rows();
                    let mut dp = vec![0.0; np * d];
                    let mut dq = vec![0.0; nq * d];
                    for i in 0..np {
                        for j in 0..nq {
                            let row = &g[(i * nq + j) * d..(i * nq + j + 1) * d];
                            for c in 0..d {
                                dp[i * d + c] += row[c];
                                dq[j * d + c] += row[c];
                            }
                        }
                    }
                    send(*p, dp);
                    send(*q, dq);
                }
                Op::Reshape(a) => send(*a, g),
                Op::Scalar(inputs) => {
                    for (input, local) in inputs {
                        send(*input, local.as_slice().iter().map(|x| x * g[0]).collect());
                    }
                }
            }
        }
    }
}

fn softmax_rows_masked(m: &Matrix, allowed: Option<&[bool]>) -> Matrix {
    let cols = m.cols();
    let ok = |i: usize| allowed.is_none_or(|a| a[i]);
    let mut data = vec![0.0; m.len()];
    for r in 0..m.rows() {
        let base = r * cols;
        let row = m.row(r);
        let max = (0..cols)
            .filter(|c| ok(base + c))
            .map(|c| row[c])
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(max.is_finite(), "softmax: row {r} has no admissible entries");
        let mut z = 0.0;
        for c in 0..cols {
            if ok(base + c) {
                let e = (row[c] - max).exp();
                data[base + c] = e;
                z += e;
            }
        }
        for x in &mut data[base..base + cols] {
            *x /= z;
        }
    }
    Matrix::from_vec_unchecked(m.rows(), cols, data)
}

/// Weight handles for [`Tape::lstm_cell`].
#[derive(Debug, Clone, Copy)]
pub struct LstmGates {
    /// `in_dim x 4*hidden`.
    pub w_x: Value,
    /// `hidden x 4*hidden`.
    pub w_h: Value,
    /// `1 x 4*hidden`.
    pub bias: Value,
}

/// Outcome of [`grad_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)` over checked entries.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries skipped because the perturbation straddles a non-differentiable point.
    pub excluded: usize,
}

/// Floor on the denominator of the relative error in [`grad_check`].
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

/// Compares reverse-mode gradients of `f` against central differences with step `h`.
///
/// `f` builds a scalar from leaves holding `inputs` and must be deterministic.
/// An entry is excluded when some `abs`/`leaky_relu` input changes sign between
/// the two perturbed evaluations or sits exactly at zero, or when any NTNN node
/// sees singular values within [`SV_COLLISION_RADIUS`] of each other or of zero.
pub fn grad_check<F>(inputs: &[Matrix], h: f64, f: F) -> GradCheck
where
    F: Fn(&mut Tape, &[Value]) -> Value,
{
    let eval = |mats: &[Matrix]| {
        let mut tape = Tape::with_kink_tracking();
        let leaves: Vec<Value> = mats.iter().map(|m| tape.param(m.clone())).collect();
        let out = f(&mut tape, &leaves);
        (tape, leaves, out)
    };
    let (mut tape, leaves, out) = eval(inputs);
    tape.backward(out);
    let base_collides = tape.min_singular_gap() < SV_COLLISION_RADIUS;
    let mut report = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        excluded: 0,
    };
    let mut work: Vec<Matrix> = inputs.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = tape
            .grad(*leaf)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(inputs[li].rows(), inputs[li].cols()));
        for e in 0..inputs[li].len() {
            if base_collides {
                report.excluded += 1;
                continue;
            }
            let x0 = inputs[li].as_slice()[e];
            work[li].as_mut_slice()[e] = x0 + h;
            let (tp, _, op) = eval(&work);
            work[li].as_mut_slice()[e] = x0 - h;
            let (tm, _, om) = eval(&work);
            work[li].as_mut_slice()[e] = x0;
            let kinked = tp.kink_signs() != tm.kink_signs()
                || tp.kink_signs().contains(&0)
                || tm.kink_signs().contains(&0)
                || tp.min_singular_gap() < SV_COLLISION_RADIUS
                || tm.min_singular_gap() < SV_COLLISION_RADIUS;
            if kinked {
                report.excluded += 1;
                continue;
            }
            let numeric = (tp.scalar(op) - tm.scalar(om)) / (2.0 * h);
            let a = analytic.as_slice()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn row(v: &[f64]) -> Matrix {
        Matrix::new(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn leaky_relu_negative_side() {
        let mut t = Tape::new();
        let x = t.constant(row(&[-1.0, 2.0]));
        let y = t.leaky_relu(x, DEFAULT_LEAKY_SLOPE);
        assert_eq!(t.value(y).as_slice(), &[-0.2, 2.0]);
    }

    #[test]
    fn softmax_of_constant_row_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::filled(2, 4, 3.5));
        let y = t.softmax_rows(x);
        assert!(t.value(y).as_slice().iter().all(|p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::from_rows(&[&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]]).unwrap());
        let y = t.masked_softmax_rows(x, &[true, false, true, false, true, false]);
        let v = t.value(y);
        assert_eq!(v.get(0, 1), 0.0);
        assert!((v.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(v.row(1), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn lstm_with_zero_weights_stays_zero() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::filled(3, 2, 0.7));
        let h = t.constant(Matrix::zeros(3, 4));
        let c = t.constant(Matrix::zeros(3, 4));
        let gates = LstmGates {
            w_x: t.param(Matrix::zeros(2, 16)),
            w_h: t.param(Matrix::zeros(4, 16)),
            bias: t.param(Matrix::zeros(1, 16)),
        };
        let (h2, c2) = t.lstm_cell(x, h, c, &gates);
        assert!(t.value(h2).as_slice().iter().all(|v| *v == 0.0));
        assert!(t.value(c2).as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_map_gradient_is_input_pattern() {
        let mut t = Tape::new();
        let w = t.param(Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let x = t.constant(Matrix::from_rows(&[&[5.0], &[7.0]]).unwrap());
        let y = t.matmul(w, x);
        let loss = t.sum(y);
        t.backward(loss);
        assert_eq!(t.grad(w).unwrap().as_slice(), &[5.0, 7.0, 5.0, 7.0]);
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn backward_twice_doubles() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::new();
        let w = t.param(random(3, 3, &mut rng));
        let x = t.constant(random(2, 3, &mut rng));
        let y = t.matmul(x, w);
        let y = t.tanh(y);
        let loss = t.mean(y);
        t.backward(loss);
        let once = t.grad(w).unwrap().clone();
        t.backward(loss);
        assert!(t.grad(w).unwrap().max_abs_diff(&once.scale(2.0)) < 1e-15);
        t.zero_grad();
        assert!(t.grad(w).is_none());
    }

    #[test]
    #[should_panic(expected = "loss must be scalar")]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let w = t.param(Matrix::zeros(2, 2));
        t.backward(w);
    }

    #[test]
    #[should_panic(expected = "matmul: shape mismatch")]
    fn shape_mismatch_names_op() {
        let mut t = Tape::new();
        let a = t.param(Matrix::zeros(2, 3));
        let b = t.param(Matrix::zeros(2, 3));
        t.matmul(a, b);
    }

    #[test]
    fn matmul_grad_check_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = vec![random(3, 4, &mut rng), random(4, 2, &mut rng)];
        let r = grad_check(&inputs, 1e-5, |t, l| {
            let y = t.matmul(l[0], l[1]);
            t.sum(y)
        });
        assert_eq!(r.excluded, 0);
        assert_eq!(r.checked, 20);
        assert!(r.max_rel_error <= 1e-8, "{r:?}");
    }

    #[test]
    fn two_layer_tanh_network_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(5, 3, &mut rng);
        let inputs = vec![random(3, 6, &mut rng), random(1, 6, &mut rng), random(6, 2, &mut rng), random(1, 2, &mut rng)];
        let r = grad_check(&inputs, 1e-5, |t, l| {
            let x = t.constant(x.clone());
            let h = t.matmul(x, l[0]);
            let h = t.add_row(h, l[1]);
            let h = t.tanh(h);
            let o = t.matmul(h, l[2]);
            let o = t.add_row(o, l[3]);
            let o = t.tanh(o);
            let o = t.square(o);
            t.mean(o)
        });
        assert!(r.max_rel_error <= 1e-3, "{r:?}");
        assert_eq!(r.excluded, 0);
    }

    #[test]
    fn every_op_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(3, 4, &mut rng);
        let b = random(3, 4, &mut rng);
        let p = random(2, 4, &mut rng);
        let pos = Matrix::from_fn(3, 4, |_, _| rng.random_range(0.5..2.0));
        let r = grad_check(&[a, b, p, pos], 1e-5, |t, l| {
            let s = t.sub(l[0], l[1]);
            let m = t.mul(s, l[3]);
            let lg = t.log(l[3]);
            let c = t.concat_rows(&[m, lg]);
            let sm = t.softmax_rows(c);
            let ls = t.log_softmax_rows(c);
            let pk = t.pick(ls, &[0, 1, 2, 3, 0, 1]);
            let g = t.gather_rows(sm, &[5, 0, 0]);
            let sl = t.slice_cols(g, 1, 3);
            let cc = t.concat_cols(&[sl, sl]);
            let ps = t.pair_sum(l[2], cc);
            let rs = t.reshape(ps, 12, 2);
            let sg = t.sigmoid(rs);
            let lr = t.leaky_relu(rs, 0.2);
            let ab = t.abs(lr);
            let sc = t.scale(ab, 0.3);
            let both = t.add(sg, sc);
            let s1 = t.sum(both);
            let s2 = t.mean(pk);
            let tot = t.concat_cols(&[s1, s2]);
            t.sum(tot)
        });
        assert!(r.checked > 40, "{r:?}");
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
    }

    #[test]
    fn abs_at_zero_is_excluded() {
        let r = grad_check(&[Matrix::from_rows(&[&[0.0, 1.5]]).unwrap()], 1e-5, |t, l| {
            let a = t.abs(l[0]);
            t.sum(a)
        });
        assert_eq!(r.excluded, 2);
        assert_eq!(r.checked, 0);
        let r = grad_check(&[Matrix::from_rows(&[&[-0.5, 1.5]]).unwrap()], 1e-5, |t, l| {
            let a = t.abs(l[0]);
            t.sum(a)
        });
        assert_eq!((r.checked, r.excluded), (2, 0));
    }

    #[test]
    fn softmax_backward_rows_are_orthogonal_to_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut t = Tape::new();
        let x = t.param(random(4, 4, &mut rng));
        let y = t.softmax_rows(x);
        assert!(t.value(y).as_slice().chunks(4).all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-12));
        let w = t.constant(random(4, 4, &mut rng));
        let z = t.mul(y, w);
        let loss = t.sum(z);
        t.backward(loss);
        for r in t.grad(x).unwrap().as_slice().chunks(4) {
            assert!(r.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    fn separated_slices(rng: &mut ChaCha8Rng) -> Vec<Matrix> {
        loop {
            let slices = vec![random(3, 3, rng).scale(2.0), random(3, 3, rng).scale(2.0)];
            let t = AdjacencyTensor::from_slices(&slices).unwrap();
            let (_, _, gap) = adjacency::ntnn_with_subgradient(&adjacency::tube_softmax(&t).unwrap()).unwrap();
            if gap >= 0.1 {
                return slices;
            }
        }
    }

    #[test]
    fn ntnn_node_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..3 {
            let slices = separated_slices(&mut rng);
            let r = grad_check(&slices, 1e-5, |t, l| t.ntnn(l, None, true).unwrap());
            assert_eq!(r.excluded, 0);
            assert!(r.max_rel_error <= 1e-4, "{r:?}");
        }
    }

    #[test]
    fn ntnn_node_single_head_identity() {
        let mut t = Tape::new();
        let a = t.param(Matrix::identity(3));
        let v = t.ntnn(&[a], None, true).unwrap();
        assert!((t.scalar(v) - 3.0).abs() < 1e-12);
        t.backward(v);
        assert!(t.grad(a).unwrap().max_abs_diff(&Matrix::identity(3)) < 1e-12);
    }

    #[test]
    fn ntnn_node_ascent_from_uniform_slices() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let base = [Matrix::filled(3, 3, 1.0 / 3.0), Matrix::filled(3, 3, 1.0 / 3.0)];
        let mut t = Tape::new();
        let leaves: Vec<Value> = base.iter().map(|m| t.param(m.clone())).collect();
        let v = t.ntnn(&leaves, None, true).unwrap();
        t.backward(v);
        assert!(leaves.iter().all(|l| t.grad(*l).unwrap().as_slice().iter().all(|x| x.is_finite())));

        // Off the degenerate point the ascent property holds for a small step.
        let perturbed: Vec<Matrix> = base.iter().map(|m| m.add(&random(3, 3, &mut rng).scale(0.3)).unwrap()).collect();
        let mut t = Tape::new();
        let leaves: Vec<Value> = perturbed.iter().map(|m| t.param(m.clone())).collect();
        let v = t.ntnn(&leaves, None, true).unwrap();
        let before = t.scalar(v);
        t.backward(v);
        let stepped: Vec<Matrix> = leaves
            .iter()
            .zip(&perturbed)
            .map(|(l, m)| m.add(&t.grad(*l).unwrap().scale(1e-4)).unwrap())
            .collect();
        let mut t2 = Tape::new();
        let l2: Vec<Value> = stepped.into_iter().map(|m| t2.constant(m)).collect();
        let after = t2.ntnn(&l2, None, true).unwrap();
        assert!(t2.scalar(after) > before);
    }

    #[test]
    fn ntnn_node_restricted_agents_get_zero_gradient_elsewhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut t = Tape::new();
        let s0 = t.param(random(4, 4, &mut rng));
        let s1 = t.param(random(4, 4, &mut rng));
        let v = t.ntnn(&[s0, s1], Some(&[0, 2]), true).unwrap();
        t.backward(v);
        let g = t.grad(s0).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if !([0, 2].contains(&i) && [0, 2].contains(&j)) {
                    assert_eq!(g.get(i, j), 0.0);
                }
            }
        }
    }
}
