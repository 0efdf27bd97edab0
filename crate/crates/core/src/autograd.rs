//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! enough information to propagate gradients back to its inputs. Vectors are
//! represented as `1 x n` or `n x 1` matrices and scalars as `1 x 1`.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis};

use crate::params::{ParamId, ParamStore};

pub type Matrix = Array2<f64>;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
struct LstmTape {
    xproj: Var,
    recurrent: Var,
    batch: usize,
    len: usize,
    reverse: bool,
    mask: Vec<bool>,
    /// Post-activation gates `[i | f | g | o]` per row.
    gates: Matrix,
    /// `tanh` of the cell state per row.
    cells: Matrix,
    prev_h: Matrix,
    prev_c: Matrix,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    SmoothL1(Var),
    Min(Var, Var),
    Max(Var, Var),
    Sum(Var),
    Transpose(Var),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ShiftRows { x: Var, offset: isize, block: usize },
    BroadcastRows(Var),
    RowNormalize(Var),
    SumNormalize(Var),
    Lstm(Box<LstmTape>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        debug_assert!(
            value.iter().all(|v| !v.is_nan()),
            "NaN produced by {:?}",
            op
        );
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf that is not a stored parameter.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter onto the tape. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let value = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "add_row shape mismatch");
        let value = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let value = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// Multiplies every column of `a` (`m x n`) elementwise by `col` (`m x 1`).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (m, _) = self.shape(a);
        assert_eq!(self.shape(col), (m, 1), "mul_col shape mismatch");
        let value = self.value(a) * self.value(col);
        let ng = self.ng(a) || self.ng(col);
        self.push(value, Op::MulCol(a, col), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, k), ng)
    }

    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) + k;
        let ng = self.ng(a);
        self.push(value, Op::Offset(a), ng)
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.offset(neg, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        let ng = self.ng(a);
        self.push(value, Op::Log(a), ng)
    }

    /// Elementwise clamp; the gradient flows only where `lo <= x <= hi`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).mapv(|x| x.clamp(lo, hi));
        let ng = self.ng(a);
        self.push(value, Op::Clamp(a, lo, hi), ng)
    }

    /// Elementwise smooth-L1 with the kink at `|x| = 1`.
    pub fn smooth_l1(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| {
            if x.abs() < 1.0 {
                0.5 * x * x
            } else {
                x.abs() - 0.5
            }
        });
        let ng = self.ng(a);
        self.push(value, Op::SmoothL1(a), ng)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b));
        let mut value = self.value(a).clone();
        value.zip_mut_with(self.value(b), |x, &y| *x = x.min(y));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Min(a, b), ng)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b));
        let mut value = self.value(a).clone();
        value.zip_mut_with(self.value(b), |x, &y| *x = x.max(y));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Max(a, b), ng)
    }

    /// Sum of all entries, as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::Sum(a), ng)
    }

    /// Sums a list of `1 x 1` nodes; an empty list yields a constant zero.
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        match terms.split_first() {
            None => self.constant(Matrix::zeros((1, 1))),
            Some((&first, rest)) => rest.iter().fold(first, |acc, &t| self.add(acc, t)),
        }
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    /// Row-wise softmax restricted to the columns where `mask` is set; masked
    /// columns get exactly zero weight. A row with no valid column is all zero.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let x = self.value(a);
        let (m, n) = x.dim();
        if let Some(mask) = mask {
            assert_eq!(mask.len(), n, "softmax mask length");
        }
        let valid = |j: usize| mask.is_none_or(|mk| mk[j]);
        let mut value = Matrix::zeros((m, n));
        for i in 0..m {
            let max = (0..n)
                .filter(|&j| valid(j))
                .map(|j| x[[i, j]])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for j in (0..n).filter(|&j| valid(j)) {
                let e = (x[[i, j]] - max).exp();
                value[[i, j]] = e;
                total += e;
            }
            for j in 0..n {
                value[[i, j]] /= total;
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols shape mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows shape mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let ng = self.ng(a);
        self.push(value, Op::SliceRows(a, start), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(a);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    /// Shifts rows within consecutive blocks of `block` rows:
    /// `y[b*block + t] = x[b*block + t + offset]`, zero outside the block.
    pub fn shift_rows(&mut self, a: Var, offset: isize, block: usize) -> Var {
        let x = self.value(a);
        let (m, n) = x.dim();
        assert!(block > 0 && m % block == 0, "shift_rows block size");
        let mut value = Matrix::zeros((m, n));
        for b in 0..m / block {
            for t in 0..block {
                let src = t as isize + offset;
                if src >= 0 && (src as usize) < block {
                    value
                        .row_mut(b * block + t)
                        .assign(&x.row(b * block + src as usize));
                }
            }
        }
        let ng = self.ng(a);
        self.push(
            value,
            Op::ShiftRows {
                x: a,
                offset,
                block,
            },
            ng,
        )
    }

    /// Repeats a `1 x n` row `m` times.
    pub fn broadcast_rows(&mut self, a: Var, m: usize) -> Var {
        let row = self.value(a);
        assert_eq!(row.nrows(), 1, "broadcast_rows expects a row");
        let value = row
            .broadcast((m, row.ncols()))
            .expect("broadcast")
            .to_owned();
        let ng = self.ng(a);
        self.push(value, Op::BroadcastRows(a), ng)
    }

    /// Scales every row to unit L2 norm.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let n = row.dot(&row).sqrt().max(1e-12);
            row /= n;
        }
        let ng = self.ng(a);
        self.push(value, Op::RowNormalize(a), ng)
    }

    /// Divides every row by its sum. Rows summing to zero are left at zero.
    pub fn sum_normalize(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let total = row.sum();
            if total != 0.0 {
                row /= total;
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::SumNormalize(a), ng)
    }

    /// Single-direction LSTM over a batch laid out sample-major.
    ///
    /// `xproj` holds the input projections (bias included) for `batch`
    /// sequences of `len` steps each, row `b * len + t`, width `4h` ordered as
    /// input, forget, cell and output gates. `recurrent` is `h x 4h`. Rows with
    /// `mask[row] == false` keep the state unchanged and output zero.
    pub fn lstm(
        &mut self,
        xproj: Var,
        recurrent: Var,
        batch: usize,
        len: usize,
        mask: &[bool],
        reverse: bool,
    ) -> Var {
        let u = self.value(recurrent);
        let (hidden, four_h) = u.dim();
        assert_eq!(four_h, 4 * hidden, "lstm recurrent shape");
        let x = self.value(xproj);
        assert_eq!(x.dim(), (batch * len, four_h), "lstm input shape");
        assert_eq!(mask.len(), batch * len, "lstm mask length");

        let rows = batch * len;
        let mut out = Matrix::zeros((rows, hidden));
        let mut gates = Matrix::zeros((rows, four_h));
        let mut cells = Matrix::zeros((rows, hidden));
        let mut prev_h = Matrix::zeros((rows, hidden));
        let mut prev_c = Matrix::zeros((rows, hidden));
        let mut h = Matrix::zeros((batch, hidden));
        let mut c = Matrix::zeros((batch, hidden));

        for step in 0..len {
            let t = if reverse { len - 1 - step } else { step };
            let rec = h.dot(u);
            for b in 0..batch {
                let row = b * len + t;
                if !mask[row] {
                    continue;
                }
                for j in 0..hidden {
                    let i_g = sigmoid(x[[row, j]] + rec[[b, j]]);
                    let f_g = sigmoid(x[[row, hidden + j]] + rec[[b, hidden + j]]);
                    let g_g = (x[[row, 2 * hidden + j]] + rec[[b, 2 * hidden + j]]).tanh();
                    let o_g = sigmoid(x[[row, 3 * hidden + j]] + rec[[b, 3 * hidden + j]]);
                    prev_h[[row, j]] = h[[b, j]];
                    prev_c[[row, j]] = c[[b, j]];
                    let cn = f_g * c[[b, j]] + i_g * g_g;
                    let tc = cn.tanh();
                    let hn = o_g * tc;
                    gates[[row, j]] = i_g;
                    gates[[row, hidden + j]] = f_g;
                    gates[[row, 2 * hidden + j]] = g_g;
                    gates[[row, 3 * hidden + j]] = o_g;
                    cells[[row, j]] = tc;
                    out[[row, j]] = hn;
                    c[[b, j]] = cn;
                    h[[b, j]] = hn;
                }
            }
        }
        let ng = self.ng(xproj) || self.ng(recurrent);
        self.push(
            out,
            Op::Lstm(Box::new(LstmTape {
                xproj,
                recurrent,
                batch,
                len,
                reverse,
                mask: mask.to_vec(),
                gates,
                cells,
                prev_h,
                prev_c,
            })),
            ng,
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &gy, &mut grads);
            }
            grads[idx] = Some(gy);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, gy: &Matrix, grads: &mut [Option<Matrix>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, g: Matrix| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, gy.dot(&val(*b).t()));
                }
                if self.ng(*b) {
                    acc(*b, val(*a).t().dot(gy));
                }
            }
            Op::Add(a, b) => {
                acc(*a, gy.clone());
                acc(*b, gy.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, gy.clone());
                acc(*b, -gy);
            }
            Op::AddRow(a, r) => {
                acc(*a, gy.clone());
                acc(*r, gy.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Mul(a, b) => {
                acc(*a, gy * val(*b));
                acc(*b, gy * val(*a));
            }
            Op::MulCol(a, c) => {
                acc(*a, gy * val(*c));
                acc(*c, (gy * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1)));
            }
            Op::Scale(a, k) => acc(*a, gy * *k),
            Op::Offset(a) => acc(*a, gy.clone()),
            Op::Sigmoid(a) => {
                let mut g = gy.clone();
                g.zip_mut_with(&node.value, |g, &y| *g *= y * (1.0 - y));
                acc(*a, g);
            }
            Op::Tanh(a) => {
                let mut g = gy.clone();
                g.zip_mut_with(&node.value, |g, &y| *g *= 1.0 - y * y);
                acc(*a, g);
            }
            Op::Relu(a) => {
                let mut g = gy.clone();
                g.zip_mut_with(val(*a), |g, &x| {
                    if x <= 0.0 {
                        *g = 0.0
                    }
                });
                acc(*a, g);
            }
            Op::Log(a) => acc(*a, gy / val(*a)),
            Op::Clamp(a, lo, hi) => {
                let mut g = gy.clone();
                g.zip_mut_with(val(*a), |g, &x| {
                    if x < *lo || x > *hi {
                        *g = 0.0
                    }
                });
                acc(*a, g);
            }
            Op::SmoothL1(a) => {
                let mut g = gy.clone();
                g.zip_mut_with(val(*a), |g, &x| {
                    *g *= if x.abs() < 1.0 { x } else { x.signum() }
                });
                acc(*a, g);
            }
            Op::Min(a, b) | Op::Max(a, b) => {
                let take_a_when_le = matches!(node.op, Op::Min(..));
                let (x, y) = (val(*a), val(*b));
                let mut ga = gy.clone();
                let mut gb = gy.clone();
                ndarray::Zip::from(&mut ga)
                    .and(&mut gb)
                    .and(x)
                    .and(y)
                    .for_each(|ga, gb, &x, &y| {
                        let pick_a = if take_a_when_le { x <= y } else { x >= y };
                        if pick_a {
                            *gb = 0.0
                        } else {
                            *ga = 0.0
                        }
                    });
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Sum(a) => {
                let shape = val(*a).dim();
                acc(*a, Matrix::from_elem(shape, gy[[0, 0]]));
            }
            Op::Transpose(a) => acc(*a, gy.t().to_owned()),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut g = Matrix::zeros(y.dim());
                for i in 0..y.nrows() {
                    let dot = y.row(i).dot(&gy.row(i));
                    for j in 0..y.ncols() {
                        g[[i, j]] = y[[i, j]] * (gy[[i, j]] - dot);
                    }
                }
                acc(*a, g);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = val(p).ncols();
                    acc(p, gy.slice(s![.., start..start + w]).to_owned());
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = val(p).nrows();
                    acc(p, gy.slice(s![start..start + h, ..]).to_owned());
                    start += h;
                }
            }
            Op::SliceRows(a, start) => {
                if self.nodes[a.0].needs_grad {
                    let g = grads[a.0].get_or_insert_with(|| Matrix::zeros(val(*a).dim()));
                    let mut dst = g.slice_mut(s![*start..*start + gy.nrows(), ..]);
                    dst += gy;
                }
            }
            Op::SliceCols(a, start) => {
                if self.nodes[a.0].needs_grad {
                    let g = grads[a.0].get_or_insert_with(|| Matrix::zeros(val(*a).dim()));
                    let mut dst = g.slice_mut(s![.., *start..*start + gy.ncols()]);
                    dst += gy;
                }
            }
            Op::ShiftRows { x, offset, block } => {
                let (m, n) = val(*x).dim();
                let mut g = Matrix::zeros((m, n));
                for b in 0..m / block {
                    for t in 0..*block {
                        let src = t as isize + offset;
                        if src >= 0 && (src as usize) < *block {
                            let mut dst = g.row_mut(b * block + src as usize);
                            dst += &gy.row(b * block + t);
                        }
                    }
                }
                acc(*x, g);
            }
            Op::BroadcastRows(a) => acc(*a, gy.sum_axis(Axis(0)).insert_axis(Axis(0))),
            Op::RowNormalize(a) => {
                let x = val(*a);
                let y = &node.value;
                let mut g = Matrix::zeros(x.dim());
                for i in 0..x.nrows() {
                    let n = x.row(i).dot(&x.row(i)).sqrt().max(1e-12);
                    let dot = y.row(i).dot(&gy.row(i));
                    for j in 0..x.ncols() {
                        g[[i, j]] = (gy[[i, j]] - y[[i, j]] * dot) / n;
                    }
                }
                acc(*a, g);
            }
            Op::SumNormalize(a) => {
                let x = val(*a);
                let y = &node.value;
                let mut g = Matrix::zeros(x.dim());
                for i in 0..x.nrows() {
                    let total = x.row(i).sum();
                    if total == 0.0 {
                        continue;
                    }
                    let dot = y.row(i).dot(&gy.row(i));
                    for j in 0..x.ncols() {
                        g[[i, j]] = (gy[[i, j]] - dot) / total;
                    }
                }
                acc(*a, g);
            }
            Op::Lstm(tape) => {
                let (gx, gu) = self.lstm_backward(tape, gy);
                acc(tape.xproj, gx);
                acc(tape.recurrent, gu);
            }
        }
    }

    fn lstm_backward(&self, tape: &LstmTape, gy: &Matrix) -> (Matrix, Matrix) {
        let u = self.value(tape.recurrent);
        let (hidden, four_h) = u.dim();
        let (batch, len) = (tape.batch, tape.len);
        let mut gx = Matrix::zeros((batch * len, four_h));
        let mut gu = Matrix::zeros((hidden, four_h));
        let mut dh = Matrix::zeros((batch, hidden));
        let mut dc = Matrix::zeros((batch, hidden));
        let mut dpre = Matrix::zeros((batch, four_h));
        let mut hprev = Matrix::zeros((batch, hidden));

        for step in (0..len).rev() {
            let t = if tape.reverse { len - 1 - step } else { step };
            dpre.fill(0.0);
            hprev.fill(0.0);
            for b in 0..batch {
                let row = b * len + t;
                if !tape.mask[row] {
                    continue;
                }
                for j in 0..hidden {
                    let i_g = tape.gates[[row, j]];
                    let f_g = tape.gates[[row, hidden + j]];
                    let g_g = tape.gates[[row, 2 * hidden + j]];
                    let o_g = tape.gates[[row, 3 * hidden + j]];
                    let tc = tape.cells[[row, j]];
                    let dh_t = gy[[row, j]] + dh[[b, j]];
                    let d_o = dh_t * tc;
                    let dcn = dc[[b, j]] + dh_t * o_g * (1.0 - tc * tc);
                    let d_i = dcn * g_g;
                    let d_g = dcn * i_g;
                    let d_f = dcn * tape.prev_c[[row, j]];
                    dc[[b, j]] = dcn * f_g;
                    dpre[[b, j]] = d_i * i_g * (1.0 - i_g);
                    dpre[[b, hidden + j]] = d_f * f_g * (1.0 - f_g);
                    dpre[[b, 2 * hidden + j]] = d_g * (1.0 - g_g * g_g);
                    dpre[[b, 3 * hidden + j]] = d_o * o_g * (1.0 - o_g);
                    hprev[[b, j]] = tape.prev_h[[row, j]];
                }
                gx.row_mut(row).assign(&dpre.row(b));
            }
            gu += &hprev.t().dot(&dpre);
            let dh_rec = dpre.dot(&u.t());
            for b in 0..batch {
                if tape.mask[b * len + t] {
                    dh.row_mut(b).assign(&dh_rec.row(b));
                }
            }
        }
        (gx, gu)
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not influence it.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of every stored parameter bound on `graph`, indexed by [`ParamId`].
    pub fn for_params(&self, graph: &Graph, num_params: usize) -> Vec<Option<Matrix>> {
        let mut out = vec![None; num_params];
        for (&id, &v) in &graph.params {
            if let Some(g) = self.get(v) {
                out[id.index()] = Some(g.clone());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of `f` at every coordinate of every input.
    fn check<F>(inputs: Vec<Matrix>, f: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|m| g.input(m.clone())).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out);
        let eval = |ins: &[Matrix]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|m| g.input(m.clone())).collect();
            let out = f(&mut g, &vars);
            g.scalar(out)
        };
        let h = 1e-6;
        for (k, m) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[k])
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(m.dim()));
            for idx in 0..m.len() {
                let mut plus = inputs.clone();
                let mut minus = inputs.clone();
                plus[k].as_slice_mut().unwrap()[idx] += h;
                minus[k].as_slice_mut().unwrap()[idx] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = analytic.as_slice().unwrap()[idx];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(err < 1e-4, "input {k} idx {idx}: fd {fd} vs analytic {an}");
            }
        }
    }

    #[test]
    fn elementwise_and_matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 2);
        let r = random(&mut rng, 1, 2);
        check(vec![a, b, r], |g, v| {
            let m = g.matmul(v[0], v[1]);
            let m = g.add_row(m, v[2]);
            let s = g.sigmoid(m);
            let t = g.tanh(m);
            let p = g.mul(s, t);
            let q = g.smooth_l1(p);
            let sq = g.mul(q, q);
            g.sum(sq)
        });
    }

    #[test]
    fn structural_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, 6, 3);
        let c = random(&mut rng, 6, 1);
        check(vec![a, c], |g, v| {
            let sh = g.shift_rows(v[0], -1, 3);
            let sh2 = g.shift_rows(v[0], 1, 3);
            let cat = g.concat_cols(&[sh, v[0], sh2]);
            let mc = g.mul_col(cat, v[1]);
            let top = g.slice_rows(mc, 1, 4);
            let left = g.slice_cols(top, 2, 5);
            let tt = g.transpose(left);
            let rows = g.concat_rows(&[tt, tt]);
            let pos = g.sigmoid(rows);
            let rows = g.sum_normalize(pos);
            let n = g.row_normalize(rows);
            let shape = g.shape(n);
            let w = g.constant(Matrix::from_shape_fn(shape, |(i, j)| (i * 7 + j) as f64 * 0.1));
            let p = g.mul(n, w);
            g.sum(p)
        });
    }

    #[test]
    fn softmax_and_log_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 2, 5);
        let mask = [true, false, true, true, false];
        check(vec![a], move |g, v| {
            let sm = g.softmax_rows(v[0], Some(&mask));
            let c = g.clamp(sm, 1e-8, 1.0);
            let l = g.log(c);
            let w = g.constant(Matrix::from_shape_fn((2, 5), |(i, j)| {
                if mask[j] {
                    (i + j) as f64
                } else {
                    0.0
                }
            }));
            let p = g.mul(l, w);
            g.sum(p)
        });
    }

    #[test]
    fn masked_softmax_zeroes_invalid_columns() {
        let mut g = Graph::new();
        let a = g.constant(Matrix::from_shape_vec((1, 3), vec![5.0, 1.0, 2.0]).unwrap());
        let sm = g.softmax_rows(a, Some(&[false, true, true]));
        let v = g.value(sm);
        assert_eq!(v[[0, 0]], 0.0);
        assert!((v.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn min_max_route_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&mut rng, 2, 3);
        let b = random(&mut rng, 2, 3);
        check(vec![a, b], |g, v| {
            let lo = g.minimum(v[0], v[1]);
            let hi = g.maximum(v[0], v[1]);
            let hi2 = g.scale(hi, 3.0);
            let s = g.add(lo, hi2);
            let row = g.slice_rows(s, 1, 1);
            let s = g.broadcast_rows(row, 3);
            g.sum(s)
        });
    }

    #[test]
    fn lstm_gradients_with_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (batch, len, hidden) = (2, 4, 3);
        let x = random(&mut rng, batch * len, 4 * hidden);
        let u = random(&mut rng, hidden, 4 * hidden);
        let mask = vec![true, true, true, true, true, true, false, false];
        for reverse in [false, true] {
            let mask = mask.clone();
            check(vec![x.clone(), u.clone()], move |g, v| {
                let y = g.lstm(v[0], v[1], batch, len, &mask, reverse);
                let w = g.constant(Matrix::from_shape_fn((batch * len, hidden), |(i, j)| {
                    ((i * 3 + j) % 5) as f64 - 2.0
                }));
                let p = g.mul(y, w);
                g.sum(p)
            });
        }
    }

    #[test]
    fn lstm_padding_does_not_change_valid_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let hidden = 2;
        let short = random(&mut rng, 3, 4 * hidden);
        let u = random(&mut rng, hidden, 4 * hidden);
        let mut padded = Matrix::zeros((5, 4 * hidden));
        padded.slice_mut(s![0..3, ..]).assign(&short);
        for reverse in [false, true] {
            let mut g = Graph::new();
            let xs = g.constant(short.clone());
            let xp = g.constant(padded.clone());
            let uu = g.constant(u.clone());
            let a = g.lstm(xs, uu, 1, 3, &[true; 3], reverse);
            let b = g.lstm(xp, uu, 1, 5, &[true, true, true, false, false], reverse);
            let (av, bv) = (g.value(a).clone(), g.value(b).clone());
            assert_eq!(av, bv.slice(s![0..3, ..]).to_owned());
            assert!(bv.slice(s![3..5, ..]).iter().all(|&v| v == 0.0));
        }
    }
}
