//! Append-only computation graph with reverse-mode accumulation.

use super::Tensor;
use crate::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    AddRow { x: Var, bias: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Min(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Relu(Var),
    Abs(Var),
    Square(Var),
    Exp(Var),
    Ln(Var),
    Softplus(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Concat(Var, Var),
    Slice { x: Var, start: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::AddRow { .. } => "add_row",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Min(..) => "min",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Abs(..) => "abs",
            Op::Square(..) => "square",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Softplus(..) => "softplus",
            Op::Clamp { .. } => "clamp",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::RowSum(..) => "row_sum",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Records primitive operations in topological order.
///
/// Shape mismatches between operands are programming errors and panic.
/// Non-finite results do not panic; the first offending node is remembered
/// and surfaced by [`Tape::check`] and [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    non_finite: Option<(usize, &'static str)>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

/// `c += op(a) * op(b)` for row-major storage described by explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], a_strides: (usize, usize), b: &[f64], b_strides: (usize, usize), c: &mut [f64]) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe in-bounds views of `a` (m×k), `b` (k×n)
    // and `c` (m×n, row-major, contiguous); all callers derive them from the
    // operand shapes checked at record time.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Errors if any recorded value is NaN or infinite.
    pub fn check(&self) -> Result<()> {
        match self.non_finite {
            Some((node, op)) => Err(Error::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let idx = self.nodes.len();
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some((idx, op.name()));
        }
        self.nodes.push(Node { op, value });
        Var(idx)
    }

    /// Records a leaf. Parameters and constants are both leaves; gradients
    /// are available for every leaf after [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) {
        assert_eq!(self.shape(a), self.shape(b), "{op}: operand shapes differ");
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.nodes[x.0].value.map(f);
        self.push(op, value)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let name = op.name();
        self.same_shape(name, a, b);
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(op, value)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        assert_eq!(vb.shape().len(), 2, "matmul: right operand must be a matrix");
        let (n, k) = (va.rows(), va.cols());
        let (bk, m, b_strides) = if trans_b { (vb.cols(), vb.rows(), (1, vb.cols())) } else { (vb.rows(), vb.cols(), (vb.cols(), 1)) };
        assert_eq!(k, bk, "matmul: inner dimensions differ");
        let mut out = vec![0.0; n * m];
        gemm_acc(n, k, m, va.data(), (k, 1), vb.data(), b_strides, &mut out);
        let shape = if va.shape().len() == 2 { vec![n, m] } else { vec![m] };
        self.push(Op::MatMul { a, b, trans_b }, Tensor::from_parts(shape, out))
    }

    /// `a · b` with `a` of shape `[n, k]` (or `[k]`) and `b` of shape `[k, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` with `b` of shape `[m, k]`; the layout used by dense layers.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    /// Adds a `[m]` bias to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let vb = &self.nodes[bias.0].value;
        assert_eq!(vb.len(), vx.cols(), "add_row: bias width differs");
        let mut value = vx.clone();
        let c = vx.cols();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += vb.data()[i % c];
        }
        self.push(Op::AddRow { x, bias }, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Min(a, b), f64::min)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    /// Adds the constant `c` to every entry.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Offset(x), |v| v + c)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Op::Ln(x), f64::ln)
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Op::Mean(x), Tensor::scalar(s))
    }

    /// Sums each row, giving `[rows, 1]`.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let data: Vec<f64> = v.rows_iter().map(|r| r.iter().sum()).collect();
        let value = Tensor::from_parts(vec![data.len(), 1], data);
        self.push(Op::RowSum(x), value)
    }

    /// Column-wise concatenation of two tensors with equal row counts.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        assert_eq!(va.rows(), vb.rows(), "concat: row counts differ");
        assert_eq!(va.shape().len(), vb.shape().len(), "concat: ranks differ");
        let (ca, cb) = (va.cols(), vb.cols());
        let mut data = Vec::with_capacity(va.len() + vb.len());
        for r in 0..va.rows() {
            data.extend_from_slice(&va.data()[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&vb.data()[r * cb..(r + 1) * cb]);
        }
        let shape = if va.shape().len() == 2 { vec![va.rows(), ca + cb] } else { vec![ca + cb] };
        self.push(Op::Concat(a, b), Tensor::from_parts(shape, data))
    }

    /// Columns `start..start + len` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = &self.nodes[x.0].value;
        let c = vx.cols();
        assert!(start + len <= c, "slice_cols: range out of bounds");
        let data: Vec<f64> = vx.rows_iter().flat_map(|r| r[start..start + len].iter().copied()).collect();
        let shape = if vx.shape().len() == 2 { vec![vx.rows(), len] } else { vec![len] };
        self.push(Op::Slice { x, start }, Tensor::from_parts(shape, data))
    }

    /// Reverse sweep from a scalar root.
    ///
    /// Every node that does not influence `root` gets a zero adjoint.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.check()?;
        let root_value = &self.nodes[root.0].value;
        if !root_value.is_scalar() {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            let y = node.value.data();
            match node.op {
                Op::Leaf => {}
                Op::MatMul { a, b, trans_b } => {
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    let (n, k) = (va.rows(), va.cols());
                    let (m, b_strides) = if trans_b { (vb.rows(), (1, vb.cols())) } else { (vb.cols(), (vb.cols(), 1)) };
                    // dA = G · opB(B)ᵀ
                    let ga = grad_slot(&mut adj, a, va.len());
                    gemm_acc(n, m, k, &g, (m, 1), vb.data(), (b_strides.1, b_strides.0), ga);
                    let gb = grad_slot(&mut adj, b, vb.len());
                    if trans_b {
                        // dB = Gᵀ · A, stored [m, k]
                        gemm_acc(m, n, k, &g, (1, m), va.data(), (k, 1), gb);
                    } else {
                        // dB = Aᵀ · G, stored [k, m]
                        gemm_acc(k, n, m, va.data(), (1, k), &g, (m, 1), gb);
                    }
                }
                Op::AddRow { x, bias } => {
                    let c = self.nodes[bias.0].value.len();
                    let gx = grad_slot(&mut adj, x, g.len());
                    add_into(gx, &g);
                    let gb = grad_slot(&mut adj, bias, c);
                    for (j, v) in g.iter().enumerate() {
                        gb[j % c] += v;
                    }
                }
                Op::Add(a, b) => {
                    add_into(grad_slot(&mut adj, a, g.len()), &g);
                    add_into(grad_slot(&mut adj, b, g.len()), &g);
                }
                Op::Sub(a, b) => {
                    add_into(grad_slot(&mut adj, a, g.len()), &g);
                    let gb = grad_slot(&mut adj, b, g.len());
                    for (d, v) in gb.iter_mut().zip(&g) {
                        *d -= v;
                    }
                }
                Op::Mul(a, b) => {
                    let va = self.nodes[a.0].value.data();
                    let vb = self.nodes[b.0].value.data();
                    let ga = grad_slot(&mut adj, a, g.len());
                    for ((d, gi), bi) in ga.iter_mut().zip(&g).zip(vb) {
                        *d += gi * bi;
                    }
                    let gb = grad_slot(&mut adj, b, g.len());
                    for ((d, gi), ai) in gb.iter_mut().zip(&g).zip(va) {
                        *d += gi * ai;
                    }
                }
                Op::Min(a, b) => {
                    let va = self.nodes[a.0].value.data();
                    let vb = self.nodes[b.0].value.data();
                    let pick_a: Vec<bool> = va.iter().zip(vb).map(|(x, y)| x <= y).collect();
                    let ga = grad_slot(&mut adj, a, g.len());
                    for ((d, gi), &p) in ga.iter_mut().zip(&g).zip(&pick_a) {
                        if p {
                            *d += gi;
                        }
                    }
                    let gb = grad_slot(&mut adj, b, g.len());
                    for ((d, gi), &p) in gb.iter_mut().zip(&g).zip(&pick_a) {
                        if !p {
                            *d += gi;
                        }
                    }
                }
                Op::Scale(x, c) => {
                    let gx = grad_slot(&mut adj, x, g.len());
                    for (d, gi) in gx.iter_mut().zip(&g) {
                        *d += c * gi;
                    }
                }
                Op::Offset(x) => add_into(grad_slot(&mut adj, x, g.len()), &g),
                Op::Tanh(x) => {
                    let gx = grad_slot(&mut adj, x, g.len());
                    for ((d, gi), yi) in gx.iter_mut().zip(&g).zip(y) {
                        *d += gi * (1.0 - yi * yi);
                    }
                }
                Op::Relu(x) => {
                    let xv = self.nodes[x.0].value.data();
                    let gx = grad_slot(&mut adj, x, g.len());
                    for ((d, gi), xi) in gx.iter_mut().zip(&g).zip(xv) {
                        if *xi > 0.0 {
                            *d += gi;
                        }
                    }
                }
                Op::Abs(x) => {
                    let xv = self.nodes[x.0].value.data();
                    let gx = grad_slot(&mut adj, x, g.len());
                    for ((d, gi), xi) in gx.iter_mut().zip(&g).zip(xv) {
                        if *xi > 0.0 {
                            *d += gi;
                        } else if *xi < 0.0 {
                            *d -= gi;
                        }
                    }
                }
                Op::Square(x) => {
                    let xv = self.nodes[x.0].value.data();
                    let gx = grad_slot(&mut adj, x, g.len());
                    for ((d, gi), xi) in gx.iter_mut().zip(&g).zip(xv) {
                        *d += 2.0 * xi * gi;
                    }
                }
                Op::Exp(x) => {
                    let gx = grad_slot(&mut adj, x, g.len());
                    for ((d, gi), yi) in gx.iter_mut().zip(&g).zip(y) {
                        *d += gi * yi;
                    }
                }
                Op::Ln(x) => {
                    let xv = self.nodes[x.0].value.data();
                    let gx = grad_slot(&mut adj, x, g.len());
                    for ((d, gi), xi) in gx.iter_mut().zip(&g).zip(xv) {
                        *d += gi / xi;
                    }
                }
                Op::Softplus(x) => {
                    let xv = self.nodes[x.0].value.data();
                    let gx = grad_slot(&mut adj, x, g.len());
                    for ((d, gi), xi) in gx.iter_mut().zip(&g).zip(xv) {
                        *d += gi * sigmoid(*xi);
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    let xv = self.nodes[x.0].value.data();
                    let gx = grad_slot(&mut adj, x, g.len());
                    for ((d, gi), xi) in gx.iter_mut().zip(&g).zip(xv) {
                        if *xi >= lo && *xi <= hi {
                            *d += gi;
                        }
                    }
                }
                Op::Sum(x) => {
                    let n = self.nodes[x.0].value.len();
                    for d in grad_slot(&mut adj, x, n) {
                        *d += g[0];
                    }
                }
                Op::Mean(x) => {
                    let n = self.nodes[x.0].value.len();
                    let s = g[0] / n as f64;
                    for d in grad_slot(&mut adj, x, n) {
                        *d += s;
                    }
                }
                Op::RowSum(x) => {
                    let vx = &self.nodes[x.0].value;
                    let c = vx.cols();
                    let gx = grad_slot(&mut adj, x, vx.len());
                    for (j, d) in gx.iter_mut().enumerate() {
                        *d += g[j / c];
                    }
                }
                Op::Concat(a, b) => {
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    let (ca, cb, rows) = (va.cols(), vb.cols(), va.rows());
                    let (la, lb) = (va.len(), vb.len());
                    let ga = grad_slot(&mut adj, a, la);
                    for r in 0..rows {
                        add_into(&mut ga[r * ca..(r + 1) * ca], &g[r * (ca + cb)..r * (ca + cb) + ca]);
                    }
                    let gb = grad_slot(&mut adj, b, lb);
                    for r in 0..rows {
                        add_into(&mut gb[r * cb..(r + 1) * cb], &g[r * (ca + cb) + ca..(r + 1) * (ca + cb)]);
                    }
                }
                Op::Slice { x, start } => {
                    let vx = &self.nodes[x.0].value;
                    let c = vx.cols();
                    let len = node.value.cols();
                    let gx = grad_slot(&mut adj, x, vx.len());
                    for r in 0..vx.rows() {
                        add_into(&mut gx[r * c + start..r * c + start + len], &g[r * len..(r + 1) * len]);
                    }
                }
            }
            // Leaves keep their adjoint for the caller.
            if matches!(node.op, Op::Leaf) {
                adj[i] = Some(g);
            }
        }

        if let Some(i) = adj.iter().position(|g| g.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite()))) {
            return Err(Error::NonFinite { op: "backward", node: i });
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { adjoints: adj, shapes })
    }
}

fn grad_slot(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Adjoints of the leaves that fed a root.
pub struct Gradients {
    adjoints: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to leaf `v`; zero if `v` did not
    /// influence the root or was recorded after it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match (self.adjoints.get(v.0), self.shapes.get(v.0)) {
            (Some(Some(g)), Some(shape)) => Tensor::from_parts(shape.clone(), g.clone()),
            (_, Some(shape)) => Tensor::zeros(shape),
            _ => Tensor::scalar(0.0),
        }
    }
}
