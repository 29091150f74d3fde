//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Operations are recorded in execution order, so the node index order is
//! already a topological order and the backward sweep is a single reverse
//! pass over the tape. Gradients come back as plain [`Matrix`] values that
//! carry no provenance: a gradient can never be differentiated again.

use std::ops::Range;

use thiserror::Error;

use super::matrix::{cholesky, cholesky_solve, Matrix};

/// Lower bound added after softplus wherever a strictly positive output is needed.
pub const SOFTPLUS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("{op}: matrix is not symmetric positive definite")]
    NotPositiveDefinite { op: &'static str },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type AdResult<T> = Result<T, AdError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    /// `a + row` where `row` is `1 x cols` and is added to every row of `a`.
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    Square(Var),
    Sqrt(Var),
    Reciprocal(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SumCols(Var),
    BroadcastRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, Range<usize>),
    SliceRows(Var, Range<usize>),
    LogSoftmaxRows(Var),
    /// `A^{-1} B` for symmetric positive-definite `A`; stores the Cholesky factor.
    SolveSpd(Var, Var, Matrix),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of a computation.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node that needs one.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; a zero matrix when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Matrix {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus_f64(x: f64) -> f64 {
    softplus(x)
}

/// Inverse of [`softplus_f64`] for `y > 0`.
pub fn inverse_softplus_f64(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a differentiable leaf (a parameter).
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a constant; no gradient flows into it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.nodes[a.0].value.map(f);
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> AdResult<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AdError::Shape { op, lhs: sa, rhs: sb });
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let value = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, f);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, op, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> AdResult<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(AdError::Shape { op: "matmul", lhs: sa, rhs: sb });
        }
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.transpose();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    /// Elementwise sum. `b` may also be a `1 x cols` row added to every row of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> AdResult<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(self.binary(a, b, Op::Add(a, b), |x, y| x + y));
        }
        if sb.0 == 1 && sb.1 == sa.1 {
            let row = self.nodes[b.0].value.clone();
            let mut value = self.nodes[a.0].value.clone();
            let cols = sa.1;
            for (i, v) in value.data_mut().iter_mut().enumerate() {
                *v += row.data()[i % cols];
            }
            let ng = self.ng(a) || self.ng(b);
            return Ok(self.push(value, Op::AddRow(a, b), ng));
        }
        Err(AdError::Shape { op: "add", lhs: sa, rhs: sb })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> AdResult<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.binary(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> AdResult<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.binary(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn div(&mut self, a: Var, b: Var) -> AdResult<Var> {
        self.same_shape("div", a, b)?;
        Ok(self.binary(a, b, Op::Div(a, b), |x, y| x / y))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    /// `softplus(a) + SOFTPLUS_FLOOR`: the positivity map used for precisions and variances.
    pub fn positive(&mut self, a: Var) -> Var {
        let s = self.softplus(a);
        self.add_scalar(s, SOFTPLUS_FLOOR)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn reciprocal(&mut self, a: Var) -> Var {
        self.unary(a, Op::Reciprocal(a), |x| 1.0 / x)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.nodes[a.0].value.sum());
        let ng = self.ng(a);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = &self.nodes[a.0].value;
        let value = Matrix::scalar(m.sum() / m.len() as f64);
        let ng = self.ng(a);
        self.push(value, Op::Mean(a), ng)
    }

    /// Sums over rows: `r x c -> 1 x c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let m = &self.nodes[a.0].value;
        let mut out = Matrix::zeros(1, m.cols());
        for r in 0..m.rows() {
            for (o, v) in out.data_mut().iter_mut().zip(m.row_slice(r)) {
                *o += v;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::SumRows(a), ng)
    }

    /// Sums over columns: `r x c -> r x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let m = &self.nodes[a.0].value;
        let data = (0..m.rows()).map(|r| m.row_slice(r).iter().sum()).collect();
        let out = Matrix::from_vec(m.rows(), 1, data);
        let ng = self.ng(a);
        self.push(out, Op::SumCols(a), ng)
    }

    /// Repeats a `1 x c` row `n` times: `1 x c -> n x c`.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> AdResult<Var> {
        let m = &self.nodes[a.0].value;
        if m.rows() != 1 {
            return Err(AdError::Shape { op: "broadcast_rows", lhs: m.shape(), rhs: (n, m.cols()) });
        }
        let mut data = Vec::with_capacity(n * m.cols());
        for _ in 0..n {
            data.extend_from_slice(m.data());
        }
        let out = Matrix::from_vec(n, m.cols(), data);
        let ng = self.ng(a);
        Ok(self.push(out, Op::BroadcastRows(a), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> AdResult<Var> {
        let rows = self.shape(parts[0]).0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(AdError::Shape { op: "concat_cols", lhs: self.shape(parts[0]), rhs: self.shape(p) });
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let m = &self.nodes[p.0].value;
            for r in 0..rows {
                out.data_mut()[r * cols + offset..r * cols + offset + m.cols()].copy_from_slice(m.row_slice(r));
            }
            offset += m.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> AdResult<Var> {
        let cols = self.shape(parts[0]).1;
        for &p in parts {
            if self.shape(p).1 != cols {
                return Err(AdError::Shape { op: "concat_rows", lhs: self.shape(parts[0]), rhs: self.shape(p) });
            }
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let rows = data.len() / cols.max(1);
        let out = Matrix::from_vec(if cols == 0 { 0 } else { rows }, cols, data);
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, range: Range<usize>) -> AdResult<Var> {
        let m = &self.nodes[a.0].value;
        if range.start > range.end || range.end > m.cols() {
            return Err(AdError::Invalid {
                op: "slice_cols",
                msg: format!("range {range:?} out of bounds for shape {:?}", m.shape()),
            });
        }
        let w = range.len();
        let mut out = Matrix::zeros(m.rows(), w);
        for r in 0..m.rows() {
            out.data_mut()[r * w..(r + 1) * w].copy_from_slice(&m.row_slice(r)[range.clone()]);
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::SliceCols(a, range), ng))
    }

    pub fn slice_rows(&mut self, a: Var, range: Range<usize>) -> AdResult<Var> {
        let m = &self.nodes[a.0].value;
        if range.start > range.end || range.end > m.rows() {
            return Err(AdError::Invalid {
                op: "slice_rows",
                msg: format!("range {range:?} out of bounds for shape {:?}", m.shape()),
            });
        }
        let c = m.cols();
        let out = Matrix::from_vec(range.len(), c, m.data()[range.start * c..range.end * c].to_vec());
        let ng = self.ng(a);
        Ok(self.push(out, Op::SliceRows(a, range), ng))
    }

    /// Row-wise `x - logsumexp(x)`.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let m = &self.nodes[a.0].value;
        let mut out = m.clone();
        let c = m.cols();
        for r in 0..m.rows() {
            let row = &mut out.data_mut()[r * c..(r + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::LogSoftmaxRows(a), ng)
    }

    /// `A^{-1} B` for a symmetric positive-definite `A`.
    pub fn solve_spd(&mut self, a: Var, b: Var) -> AdResult<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.0 != sa.1 || sa.0 != sb.0 {
            return Err(AdError::Shape { op: "solve_spd", lhs: sa, rhs: sb });
        }
        let l = cholesky(&self.nodes[a.0].value).ok_or(AdError::NotPositiveDefinite { op: "solve_spd" })?;
        let x = cholesky_solve(&l, &self.nodes[b.0].value);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(x, Op::SolveSpd(a, b, l), ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> AdResult<Gradients> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(AdError::NonScalarLoss(shape));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, d: Matrix| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.matmul_t(val(*b), false, true));
                }
                if self.ng(*b) {
                    acc(*b, val(*a).matmul_t(g, true, false));
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                let mut row = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, v) in row.data_mut().iter_mut().zip(g.row_slice(r)) {
                        *o += v;
                    }
                }
                acc(*b, row);
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(val(*b), |x, y| x * y));
                acc(*b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                acc(*a, g.zip_map(bv, |x, y| x / y));
                // d(a/b)/db = -out / b
                let gb = g.zip_map(&node.value, |x, o| x * o).zip_map(bv, |x, y| -x / y);
                acc(*b, gb);
            }
            Op::Neg(a) => acc(*a, g.scale(-1.0)),
            Op::Scale(a, c) => acc(*a, g.scale(*c)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Exp(a) => acc(*a, g.zip_map(&node.value, |x, o| x * o)),
            Op::Log(a) => acc(*a, g.zip_map(val(*a), |x, y| x / y)),
            Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |x, o| x * (1.0 - o * o))),
            Op::Relu(a) => acc(*a, g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { 0.0 })),
            Op::Softplus(a) => acc(*a, g.zip_map(val(*a), |x, y| x * sigmoid(y))),
            Op::Square(a) => acc(*a, g.zip_map(val(*a), |x, y| 2.0 * x * y)),
            Op::Sqrt(a) => acc(*a, g.zip_map(&node.value, |x, o| 0.5 * x / o)),
            Op::Reciprocal(a) => acc(*a, g.zip_map(&node.value, |x, o| -x * o * o)),
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Matrix::filled(r, c, g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Matrix::filled(r, c, g.item() / (r * c) as f64));
            }
            Op::SumRows(a) => {
                let (r, c) = self.shape(*a);
                let mut d = Matrix::zeros(r, c);
                for i in 0..r {
                    d.data_mut()[i * c..(i + 1) * c].copy_from_slice(g.data());
                }
                acc(*a, d);
            }
            Op::SumCols(a) => {
                let (r, c) = self.shape(*a);
                let mut d = Matrix::zeros(r, c);
                for i in 0..r {
                    let gi = g.data()[i];
                    d.data_mut()[i * c..(i + 1) * c].iter_mut().for_each(|v| *v = gi);
                }
                acc(*a, d);
            }
            Op::BroadcastRows(a) => {
                let mut d = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, v) in d.data_mut().iter_mut().zip(g.row_slice(r)) {
                        *o += v;
                    }
                }
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    let mut d = Matrix::zeros(r, c);
                    for i in 0..r {
                        d.data_mut()[i * c..(i + 1) * c].copy_from_slice(&g.row_slice(i)[offset..offset + c]);
                    }
                    offset += c;
                    acc(p, d);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    let d = Matrix::from_vec(r, c, g.data()[offset..offset + r * c].to_vec());
                    offset += r * c;
                    acc(p, d);
                }
            }
            Op::SliceCols(a, range) => {
                let (r, c) = self.shape(*a);
                let mut d = Matrix::zeros(r, c);
                let w = range.len();
                for i in 0..r {
                    d.data_mut()[i * c + range.start..i * c + range.end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                acc(*a, d);
            }
            Op::SliceRows(a, range) => {
                let (r, c) = self.shape(*a);
                let mut d = Matrix::zeros(r, c);
                d.data_mut()[range.start * c..range.end * c].copy_from_slice(g.data());
                acc(*a, d);
            }
            Op::LogSoftmaxRows(a) => {
                // dx = g - softmax * rowsum(g)
                let out = &node.value;
                let c = out.cols();
                let mut d = g.clone();
                for r in 0..out.rows() {
                    let gs: f64 = g.row_slice(r).iter().sum();
                    for j in 0..c {
                        d.data_mut()[r * c + j] -= out.get(r, j).exp() * gs;
                    }
                }
                acc(*a, d);
            }
            Op::SolveSpd(a, b, l) => {
                // X = A^{-1} B;  dB = A^{-1} G;  dA = -dB X^T (A symmetric)
                let gb = cholesky_solve(l, g);
                if self.ng(*a) {
                    acc(*a, gb.matmul_t(&node.value, false, true).scale(-1.0));
                }
                acc(*b, gb);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_forward_and_backward() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::scalar(3.0));
        let y = t.square(x);
        assert_eq!(t.value(y).item(), 9.0);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).item(), 6.0);
    }

    #[test]
    fn softplus_at_zero_is_ln2() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::scalar(0.0));
        let y = t.softplus(x);
        assert!((t.value(y).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn softplus_large_inputs_stay_finite() {
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        assert!((inverse_softplus_f64(softplus_f64(0.3)) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new();
        let w = t.leaf(Matrix::row(&[1.0, 2.0]));
        let sq = t.mul(w, w).unwrap();
        let loss = t.sum(sq);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(w).data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let mut t = Tape::new();
        let w = t.leaf(Matrix::row(&[1.0, 2.0]));
        let c = t.constant(Matrix::scalar(5.0));
        let loss = t.scale(c, 2.0);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(w).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let w = t.leaf(Matrix::row(&[1.0, 2.0]));
        assert_eq!(t.backward(w).unwrap_err(), AdError::NonScalarLoss((1, 2)));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::zeros(3, 4));
        let b = t.leaf(Matrix::zeros(3, 2));
        let err = t.matmul(a, b).unwrap_err();
        assert_eq!(err, AdError::Shape { op: "matmul", lhs: (3, 4), rhs: (3, 2) });
        assert!(err.to_string().contains("matmul"));
        assert!(t.mul(a, b).is_err());
    }

    #[test]
    fn repeated_backward_is_identical() {
        let mut t = Tape::new();
        let w = t.leaf(Matrix::row(&[0.3, -1.2, 0.7]));
        let e = t.exp(w);
        let s = t.tanh(e);
        let loss = t.sum(s);
        let g1 = t.backward(loss).unwrap().get(w);
        let g2 = t.backward(loss).unwrap().get(w);
        assert_eq!(g1, g2);
    }

    #[test]
    fn add_row_broadcasts_bias() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::from_vec(2, 2, vec![1., 2., 3., 4.]));
        let b = t.leaf(Matrix::row(&[10., 20.]));
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[11., 22., 13., 24.]);
        let loss = t.sum(c);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(b).data(), &[2., 2.]);
    }
}
