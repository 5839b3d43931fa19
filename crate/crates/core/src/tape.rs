//! Reverse-mode differentiation tape.
//!
//! Every operation on a [`Var`] appends a node holding its forward value and
//! the handles of its parents. [`Tape::backward`] walks the nodes in reverse
//! creation order, which is a valid reverse topological order because a node
//! can only reference nodes created before it.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::{Ref, RefCell};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{axpy, gemm_nn_acc, gemm_nt_acc, gemm_tn_acc, matmul_dims, Tensor};

/// Stabilizer added to the variance in [`Var::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Reduction applied per segment by [`Var::segment_reduce`].
/// Pointwise nonlinearity of a fused [`Var::gate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
}

impl Activation {
    fn eval(self, x: f64) -> f64 {
        match self {
            Self::Sigmoid => sigmoid(x),
            Self::Tanh => crate::math::tanh(x),
        }
    }

    /// Derivative expressed through the output `y`.
    fn slope(self, y: f64) -> f64 {
        match self {
            Self::Sigmoid => y * (1.0 - y),
            Self::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Max,
    Mean,
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine { x: usize, scale: f64 },
    Sigmoid(usize),
    Tanh(usize),
    Abs(usize),
    Square(usize),
    Sum(usize),
    AddRowBias { x: usize, bias: usize },
    ConcatCols { a: usize, b: usize },
    StackRows(Vec<usize>),
    GatherRows { x: usize, index: Vec<usize> },
    SegmentMean { x: usize, segment: Vec<usize>, counts: Vec<usize> },
    SegmentMax { x: usize, source: Vec<usize> },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    ChebBasis { x: usize, operator: Arc<Tensor>, order: usize },
    ChebCombine { basis: usize, thetas: Vec<usize> },
    Channels { x: usize, start: usize },
    Gate { parts: Vec<(usize, usize)>, bias: usize, act: Activation },
    Blend { z: usize, a: usize, b: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass. Single-threaded by construction.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl core::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// A leaf that is treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op, name: &'static str, requires_grad: bool) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Accumulates d(loss)/d(node) for every node that requires a gradient.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.check_owner(loss)?;
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Usage(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, &node.op, &node.value, &g, &mut grads);
            // Only leaf gradients are read back; dropping the rest as we go
            // lets their buffers be reused by the next allocation.
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn check_owner(&self, v: Var<'_>) -> Result<()> {
        if core::ptr::eq(self, v.tape) {
            Ok(())
        } else {
            Err(Error::Usage("variable belongs to a different tape".into()))
        }
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to the leaf `v`; zeros when `v` did not
    /// influence the loss. Intermediate results do not keep gradients.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        let shape = &self.shapes[v.id];
        match &self.grads[v.id] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn get(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads[v.id].as_deref()
    }
}

fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]))
}

fn backprop(nodes: &[Node], op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |id: usize| &nodes[id].value;
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k, n) = matmul_dims(val(*a), val(*b)).expect("checked in forward");
            if let Some(da) = acc(grads, nodes, *a) {
                gemm_nt_acc(da, g, val(*b).data(), m, n, k);
            }
            if let Some(db) = acc(grads, nodes, *b) {
                gemm_tn_acc(db, val(*a).data(), g, m, k, n);
            }
        }
        Op::Add(a, b) => {
            if let Some(da) = acc(grads, nodes, *a) {
                axpy(da, 1.0, g);
            }
            if let Some(db) = acc(grads, nodes, *b) {
                axpy(db, 1.0, g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(da) = acc(grads, nodes, *a) {
                axpy(da, 1.0, g);
            }
            if let Some(db) = acc(grads, nodes, *b) {
                axpy(db, -1.0, g);
            }
        }
        Op::Mul(a, b) => {
            if let Some(da) = acc(grads, nodes, *a) {
                for ((d, gi), bi) in da.iter_mut().zip(g).zip(val(*b).data()) {
                    *d += gi * bi;
                }
            }
            if let Some(db) = acc(grads, nodes, *b) {
                for ((d, gi), ai) in db.iter_mut().zip(g).zip(val(*a).data()) {
                    *d += gi * ai;
                }
            }
        }
        Op::Affine { x, scale } => {
            if let Some(dx) = acc(grads, nodes, *x) {
                axpy(dx, *scale, g);
            }
        }
        Op::Sigmoid(x) => {
            if let Some(dx) = acc(grads, nodes, *x) {
                for ((d, gi), y) in dx.iter_mut().zip(g).zip(out.data()) {
                    *d += gi * y * (1.0 - y);
                }
            }
        }
        Op::Tanh(x) => {
            if let Some(dx) = acc(grads, nodes, *x) {
                for ((d, gi), y) in dx.iter_mut().zip(g).zip(out.data()) {
                    *d += gi * (1.0 - y * y);
                }
            }
        }
        Op::Abs(x) => {
            let xs = val(*x).data();
            if let Some(dx) = acc(grads, nodes, *x) {
                for ((d, gi), xi) in dx.iter_mut().zip(g).zip(xs) {
                    let sign = if *xi > 0.0 {
                        1.0
                    } else if *xi < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    *d += gi * sign;
                }
            }
        }
        Op::Square(x) => {
            let xs = val(*x).data();
            if let Some(dx) = acc(grads, nodes, *x) {
                for ((d, gi), xi) in dx.iter_mut().zip(g).zip(xs) {
                    *d += 2.0 * gi * xi;
                }
            }
        }
        Op::Sum(x) => {
            if let Some(dx) = acc(grads, nodes, *x) {
                let g0 = g[0];
                dx.iter_mut().for_each(|d| *d += g0);
            }
        }
        Op::AddRowBias { x, bias } => {
            let c = val(*bias).len();
            if let Some(dx) = acc(grads, nodes, *x) {
                axpy(dx, 1.0, g);
            }
            if let Some(db) = acc(grads, nodes, *bias) {
                for row in g.chunks_exact(c) {
                    axpy(db, 1.0, row);
                }
            }
        }
        Op::ConcatCols { a, b } => {
            let ca = val(*a).cols();
            let cb = val(*b).cols();
            if let Some(da) = acc(grads, nodes, *a) {
                for (d, row) in da.chunks_exact_mut(ca).zip(g.chunks_exact(ca + cb)) {
                    axpy(d, 1.0, &row[..ca]);
                }
            }
            if let Some(db) = acc(grads, nodes, *b) {
                for (d, row) in db.chunks_exact_mut(cb).zip(g.chunks_exact(ca + cb)) {
                    axpy(d, 1.0, &row[ca..]);
                }
            }
        }
        Op::StackRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = val(p).len();
                if let Some(dp) = acc(grads, nodes, p) {
                    axpy(dp, 1.0, &g[offset..offset + len]);
                }
                offset += len;
            }
        }
        Op::GatherRows { x, index } => {
            let c = out.cols();
            if let Some(dx) = acc(grads, nodes, *x) {
                for (i, &src) in index.iter().enumerate() {
                    axpy(&mut dx[src * c..(src + 1) * c], 1.0, &g[i * c..(i + 1) * c]);
                }
            }
        }
        Op::SegmentMean { x, segment, counts } => {
            let c = out.cols();
            if let Some(dx) = acc(grads, nodes, *x) {
                for (i, &s) in segment.iter().enumerate() {
                    let w = 1.0 / counts[s] as f64;
                    axpy(&mut dx[i * c..(i + 1) * c], w, &g[s * c..(s + 1) * c]);
                }
            }
        }
        Op::SegmentMax { x, source } => {
            let c = out.cols();
            if let Some(dx) = acc(grads, nodes, *x) {
                for (flat, &src_row) in source.iter().enumerate() {
                    let ch = flat % c;
                    dx[src_row * c + ch] += g[flat];
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let c = val(*gain).len();
            let gains = val(*gain).data();
            if let Some(dg) = acc(grads, nodes, *gain) {
                for (grow, xrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for ((d, gi), xh) in dg.iter_mut().zip(grow).zip(xrow) {
                        *d += gi * xh;
                    }
                }
            }
            if let Some(db) = acc(grads, nodes, *bias) {
                for grow in g.chunks_exact(c) {
                    axpy(db, 1.0, grow);
                }
            }
            if let Some(dx) = acc(grads, nodes, *x) {
                let inv_c = 1.0 / c as f64;
                for (r, ((drow, grow), xrow)) in dx
                    .chunks_exact_mut(c)
                    .zip(g.chunks_exact(c))
                    .zip(xhat.chunks_exact(c))
                    .enumerate()
                {
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..c {
                        let dxh = grow[j] * gains[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xrow[j];
                    }
                    mean_dxhat *= inv_c;
                    mean_dxhat_xhat *= inv_c;
                    for j in 0..c {
                        let dxh = grow[j] * gains[j];
                        drow[j] += rstd[r] * (dxh - mean_dxhat - xrow[j] * mean_dxhat_xhat);
                    }
                }
            }
        }
        Op::ChebBasis { x, operator, order } => {
            let Some(_) = acc(grads, nodes, *x) else { return };
            let (rows, width) = (val(*x).rows(), val(*x).cols());
            let n = operator.rows();
            let layout = BasisLayout { n, batch: rows / n, width, order: *order };
            // Reverse the recursion B_k = 2·L̃·B_{k-1} − B_{k-2}.
            let mut gk = g.to_vec();
            let lt = operator.transpose().expect("square operator");
            for k in (2..*order).rev() {
                layout.apply(&mut gk, lt.data(), k - 1, k, 2.0);
                layout.scaled_copy_add(&mut gk, k - 2, k, -1.0);
            }
            if *order > 1 {
                layout.apply(&mut gk, lt.data(), 0, 1, 1.0);
            }
            let dx = acc(grads, nodes, *x).expect("requires grad");
            for (r, d) in dx.chunks_exact_mut(width).enumerate() {
                axpy(d, 1.0, &gk[r * order * width..r * order * width + width]);
            }
        }
        Op::ChebCombine { basis, thetas } => {
            let kernels: Vec<&Tensor> = thetas.iter().map(|&t| val(t)).collect();
            let (order, c_in) = (kernels[0].shape()[0], kernels[0].shape()[2]);
            let rows = out.rows();
            let c_total = out.cols();
            let span = order * c_in;
            if let Some(db) = acc(grads, nodes, *basis) {
                let flat = flatten_kernels(kernels.iter().copied());
                gemm_nn_acc(db, g, &flat, rows, c_total, span);
            }
            if thetas.iter().any(|&t| nodes[t].requires_grad) {
                let mut flat = vec![0.0; c_total * span];
                gemm_tn_acc(&mut flat, g, val(*basis).data(), rows, c_total, span);
                let mut first = 0;
                for &t in thetas {
                    let c_out = val(t).shape()[1];
                    if let Some(dt) = acc(grads, nodes, t) {
                        for k in 0..order {
                            for o in 0..c_out {
                                let src = &flat[(first + o) * span + k * c_in..][..c_in];
                                axpy(&mut dt[(k * c_out + o) * c_in..][..c_in], 1.0, src);
                            }
                        }
                    }
                    first += c_out;
                }
            }
        }
        Op::Gate { parts, bias, act } => {
            let width = out.cols();
            let pre: Vec<f64> = g.iter().zip(out.data()).map(|(gi, y)| gi * act.slope(*y)).collect();
            for &(x, start) in parts {
                let c = val(x).cols();
                if let Some(dx) = acc(grads, nodes, x) {
                    for (d, row) in dx.chunks_exact_mut(c).zip(pre.chunks_exact(width)) {
                        axpy(&mut d[start..start + width], 1.0, row);
                    }
                }
            }
            if let Some(db) = acc(grads, nodes, *bias) {
                for row in pre.chunks_exact(width) {
                    axpy(db, 1.0, row);
                }
            }
        }
        Op::Blend { z, a, b } => {
            let (zv, av, bv) = (val(*z).data(), val(*a).data(), val(*b).data());
            if let Some(dz) = acc(grads, nodes, *z) {
                for (i, d) in dz.iter_mut().enumerate() {
                    *d += g[i] * (av[i] - bv[i]);
                }
            }
            if let Some(da) = acc(grads, nodes, *a) {
                for (i, d) in da.iter_mut().enumerate() {
                    *d += g[i] * zv[i];
                }
            }
            if let Some(db) = acc(grads, nodes, *b) {
                for (i, d) in db.iter_mut().enumerate() {
                    *d += g[i] * (1.0 - zv[i]);
                }
            }
        }
        Op::Channels { x, start } => {
            let c = val(*x).cols();
            let len = out.cols();
            if let Some(dx) = acc(grads, nodes, *x) {
                for (d, row) in dx.chunks_exact_mut(c).zip(g.chunks_exact(len)) {
                    axpy(&mut d[*start..*start + len], 1.0, row);
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if core::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Usage("operands live on different tapes".into()))
        }
    }

    fn unary(&self, name: &'static str, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        let value = self.value().map(f);
        let rg = self.tape.rg(&[self.id]);
        self.tape.push(value, op, name, rg)
    }

    fn binary(
        &self,
        other: &Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let value = {
            let a = self.value();
            let b = other.value();
            a.check_same_shape(&b, name)?;
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape(), data)?
        };
        let rg = self.tape.rg(&[self.id, other.id]);
        self.tape.push(value, op, name, rg)
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let value = self.value().matmul(&other.value())?;
        let rg = self.tape.rg(&[self.id, other.id]);
        self.tape.push(value, Op::MatMul(self.id, other.id), "matmul", rg)
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "hadamard", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Result<Var<'t>> {
        self.affine(factor, 0.0)
    }

    /// `factor · x + shift`, elementwise.
    pub fn affine(&self, factor: f64, shift: f64) -> Result<Var<'t>> {
        self.unary(
            "affine",
            Op::Affine {
                x: self.id,
                scale: factor,
            },
            |x| factor * x + shift,
        )
    }

    /// `1 − x`, elementwise.
    pub fn one_minus(&self) -> Result<Var<'t>> {
        self.affine(-1.0, 1.0)
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.unary("sigmoid", Op::Sigmoid(self.id), sigmoid)
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        self.unary("tanh", Op::Tanh(self.id), crate::math::tanh)
    }

    pub fn abs(&self) -> Result<Var<'t>> {
        self.unary("abs", Op::Abs(self.id), libm::fabs)
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.unary("square", Op::Square(self.id), |x| x * x)
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&self) -> Result<Var<'t>> {
        let value = Tensor::scalar(self.value().sum());
        let rg = self.tape.rg(&[self.id]);
        self.tape.push(value, Op::Sum(self.id), "sum", rg)
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let n = self.value().len() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Adds a length-C vector to every row of an N×C matrix.
    pub fn add_row_bias(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(bias)?;
        let value = {
            let x = self.value();
            let b = bias.value();
            let (_, c) = x.check_matrix("add_row_bias")?;
            if b.len() != c || b.rank() != 1 {
                return Err(dim_err!(
                    "add_row_bias: bias shape {:?} does not match {c} columns",
                    b.shape()
                ));
            }
            let mut data = x.data().to_vec();
            for row in data.chunks_exact_mut(c) {
                axpy(row, 1.0, b.data());
            }
            Tensor::new(x.shape(), data)?
        };
        let rg = self.tape.rg(&[self.id, bias.id]);
        self.tape.push(
            value,
            Op::AddRowBias {
                x: self.id,
                bias: bias.id,
            },
            "add_row_bias",
            rg,
        )
    }

    /// Channel-wise concatenation `[N×C₁] ⧺ [N×C₂] → [N×(C₁+C₂)]`.
    pub fn concat_channels(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let value = {
            let a = self.value();
            let b = other.value();
            let (n, ca) = a.check_matrix("concat_channels")?;
            let (nb, cb) = b.check_matrix("concat_channels")?;
            if n != nb {
                return Err(dim_err!("concat_channels: leading extents {n} and {nb} differ"));
            }
            let mut data = Vec::with_capacity(n * (ca + cb));
            for i in 0..n {
                data.extend_from_slice(a.row(i));
                data.extend_from_slice(b.row(i));
            }
            Tensor::new(&[n, ca + cb], data)?
        };
        let rg = self.tape.rg(&[self.id, other.id]);
        self.tape.push(
            value,
            Op::ConcatCols {
                a: self.id,
                b: other.id,
            },
            "concat_channels",
            rg,
        )
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn stack_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("stack_rows needs at least one part".into()))?;
        let tape = first.tape;
        let value = {
            let (_, c) = first.value().check_matrix("stack_rows")?;
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                first.same_tape(p)?;
                let v = p.value();
                let (r, pc) = v.check_matrix("stack_rows")?;
                if pc != c {
                    return Err(dim_err!("stack_rows: column counts {c} and {pc} differ"));
                }
                rows += r;
                data.extend_from_slice(v.data());
            }
            Tensor::new(&[rows, c], data)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = tape.rg(&ids);
        tape.push(value, Op::StackRows(ids), "stack_rows", rg)
    }

    /// Row `i` of the result is row `index[i]` of `self`.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Var<'t>> {
        let value = {
            let x = self.value();
            let (n, c) = x.check_matrix("gather_rows")?;
            if index.is_empty() {
                return Err(dim_err!("gather_rows: empty index"));
            }
            let mut data = Vec::with_capacity(index.len() * c);
            for &src in index {
                if src >= n {
                    return Err(dim_err!("gather_rows: row {src} out of range for {n} rows"));
                }
                data.extend_from_slice(x.row(src));
            }
            Tensor::new(&[index.len(), c], data)?
        };
        let rg = self.tape.rg(&[self.id]);
        self.tape.push(
            value,
            Op::GatherRows {
                x: self.id,
                index: index.to_vec(),
            },
            "gather_rows",
            rg,
        )
    }

    /// Per-segment, per-channel reduction of the rows of an N×C matrix.
    ///
    /// `segment[i]` names the segment of row `i`; every one of the
    /// `n_segments` segments must own at least one row. Max routes its
    /// gradient to the lowest-index row that attains the maximum.
    pub fn segment_reduce(&self, segment: &[usize], n_segments: usize, mode: Reduce) -> Result<Var<'t>> {
        let (value, op) = {
            let x = self.value();
            let (n, c) = x.check_matrix("segment_reduce")?;
            if segment.len() != n {
                return Err(dim_err!(
                    "segment_reduce: {} assignments for {n} rows",
                    segment.len()
                ));
            }
            let mut counts = vec![0usize; n_segments];
            for &s in segment {
                if s >= n_segments {
                    return Err(Error::Partition(alloc::format!(
                        "segment id {s} out of range for {n_segments} segments"
                    )));
                }
                counts[s] += 1;
            }
            if let Some(empty) = counts.iter().position(|&k| k == 0) {
                return Err(Error::Partition(alloc::format!("segment {empty} is empty")));
            }
            let mut out = vec![0.0; n_segments * c];
            match mode {
                Reduce::Mean => {
                    for (i, &s) in segment.iter().enumerate() {
                        axpy(&mut out[s * c..(s + 1) * c], 1.0 / counts[s] as f64, x.row(i));
                    }
                    (
                        Tensor::new(&[n_segments, c], out)?,
                        Op::SegmentMean {
                            x: self.id,
                            segment: segment.to_vec(),
                            counts,
                        },
                    )
                }
                Reduce::Max => {
                    let mut source = vec![usize::MAX; n_segments * c];
                    for (i, &s) in segment.iter().enumerate() {
                        for (j, &v) in x.row(i).iter().enumerate() {
                            let slot = s * c + j;
                            // Strict comparison keeps the lowest-index maximizer.
                            if source[slot] == usize::MAX || v > out[slot] {
                                out[slot] = v;
                                source[slot] = i;
                            }
                        }
                    }
                    (
                        Tensor::new(&[n_segments, c], out)?,
                        Op::SegmentMax { x: self.id, source },
                    )
                }
            }
        };
        let rg = self.tape.rg(&[self.id]);
        self.tape.push(value, op, "segment_reduce", rg)
    }

    /// Row-wise normalization to zero mean and unit (population) variance,
    /// followed by a per-channel affine map.
    pub fn layer_norm(&self, gain: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(gain)?;
        self.same_tape(bias)?;
        let (value, xhat, rstd) = {
            let x = self.value();
            let g = gain.value();
            let b = bias.value();
            let (n, c) = x.check_matrix("layer_norm")?;
            if g.len() != c || b.len() != c {
                return Err(dim_err!(
                    "layer_norm: gain {:?} / bias {:?} do not match {c} channels",
                    g.shape(),
                    b.shape()
                ));
            }
            let mut xhat = vec![0.0; n * c];
            let mut rstd = vec![0.0; n];
            let mut out = vec![0.0; n * c];
            for i in 0..n {
                let row = x.row(i);
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let r = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
                rstd[i] = r;
                for j in 0..c {
                    let xh = (row[j] - mean) * r;
                    xhat[i * c + j] = xh;
                    out[i * c + j] = xh * g.data()[j] + b.data()[j];
                }
            }
            (Tensor::new(&[n, c], out)?, xhat, rstd)
        };
        let rg = self.tape.rg(&[self.id, gain.id, bias.id]);
        self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
            "layer_norm",
            rg,
        )
    }

    /// Stacks `[T_0(L̃)x, …, T_{K-1}(L̃)x]` into an `R×K×C` tensor using the
    /// three-term Chebyshev recursion on the signal. `x` has `R = N·B` rows:
    /// row `i·B + b` holds node `i` of batch element `b`. Keeping the orders
    /// of one row adjacent turns the combine step into a single product.
    pub fn cheb_basis(&self, operator: &Arc<Tensor>, order: usize) -> Result<Var<'t>> {
        if order == 0 {
            return Err(Error::Usage("Chebyshev order must be at least 1".into()));
        }
        let value = {
            let x = self.value();
            let (rows, width) = x.check_matrix("cheb_basis")?;
            let (n, om) = operator.check_matrix("cheb_basis")?;
            if n != om || rows % n != 0 {
                return Err(dim_err!(
                    "cheb_basis: operator {:?} does not match signal with {rows} rows",
                    operator.shape()
                ));
            }
            let layout = BasisLayout { n, batch: rows / n, width, order };
            let mut data = vec![0.0; rows * order * width];
            for (r, src) in x.data().chunks_exact(width).enumerate() {
                data[r * order * width..r * order * width + width].copy_from_slice(src);
            }
            if order > 1 {
                layout.apply(&mut data, operator.data(), 1, 0, 1.0);
            }
            for k in 2..order {
                layout.scaled_copy(&mut data, k, k - 2, -1.0);
                layout.apply(&mut data, operator.data(), k, k - 1, 2.0);
            }
            Tensor::new(&[rows, order, width], data)?
        };
        let rg = self.tape.rg(&[self.id]);
        self.tape.push(
            value,
            Op::ChebBasis {
                x: self.id,
                operator: operator.clone(),
                order,
            },
            "cheb_basis",
            rg,
        )
    }

    /// `Σ_k B_k · θ_kᵀ` for a basis `R×K×C_in` and coefficients `K×C_out×C_in`.
    pub fn cheb_combine(&self, theta: &Var<'t>) -> Result<Var<'t>> {
        self.cheb_combine_many(&[*theta])
    }

    /// Several kernels applied to one basis, outputs concatenated along
    /// channels in kernel order. One product serves all of them.
    pub fn cheb_combine_many(&self, thetas: &[Var<'t>]) -> Result<Var<'t>> {
        if thetas.is_empty() {
            return Err(Error::Usage("cheb_combine: no kernels".into()));
        }
        for t in thetas {
            self.same_tape(t)?;
        }
        let value = {
            let b = self.value();
            if b.rank() != 3 {
                return Err(dim_err!("cheb_combine: expected a rank-3 basis, got {:?}", b.shape()));
            }
            let (rows, order, c_in) = (b.shape()[0], b.shape()[1], b.shape()[2]);
            let kernels: Vec<Ref<'_, Tensor>> = thetas.iter().map(Var::value).collect();
            for t in &kernels {
                if t.rank() != 3 || t.shape()[0] != order || t.shape()[2] != c_in {
                    return Err(dim_err!(
                        "cheb_combine: basis {:?} incompatible with kernel {:?}",
                        b.shape(),
                        t.shape()
                    ));
                }
            }
            let flat = flatten_kernels(kernels.iter().map(|t| &**t));
            let c_out = flat.len() / (order * c_in);
            let mut out = vec![0.0; rows * c_out];
            gemm_nt_acc(&mut out, b.data(), &flat, rows, order * c_in, c_out);
            Tensor::new(&[rows, c_out], out)?
        };
        let ids: Vec<usize> = core::iter::once(self.id).chain(thetas.iter().map(|t| t.id)).collect();
        let rg = self.tape.rg(&ids);
        self.tape.push(
            value,
            Op::ChebCombine {
                basis: self.id,
                thetas: ids[1..].to_vec(),
            },
            "cheb_combine",
            rg,
        )
    }

    /// `act(Σ_p x_p[:, start_p..start_p + W] + bias)` for `W = bias.len()`:
    /// column slices of several matrices summed, biased and activated in
    /// one op.
    pub fn gate(parts: &[(Var<'t>, usize)], bias: &Var<'t>, act: Activation) -> Result<Var<'t>> {
        let Some(&(first, _)) = parts.first() else {
            return Err(Error::Usage("gate: no inputs".into()));
        };
        let tape = first.tape;
        let value = {
            let b = bias.value();
            if b.rank() != 1 {
                return Err(dim_err!("gate: bias must be a vector, got {:?}", b.shape()));
            }
            let width = b.len();
            let rows = first.value().rows();
            let mut data: Vec<f64> = Vec::with_capacity(rows * width);
            for _ in 0..rows {
                data.extend_from_slice(b.data());
            }
            for (x, start) in parts {
                first.same_tape(x)?;
                let xv = x.value();
                let (r, c) = xv.check_matrix("gate")?;
                if r != rows || start + width > c {
                    return Err(dim_err!("gate: slice {start}..{} of {:?} with {rows} rows", start + width, xv.shape()));
                }
                for (row, src) in data.chunks_exact_mut(width).zip(xv.data().chunks_exact(c)) {
                    axpy(row, 1.0, &src[*start..start + width]);
                }
            }
            for v in &mut data {
                *v = act.eval(*v);
            }
            Tensor::new(&[rows, width], data)?
        };
        first.same_tape(bias)?;
        let ids: Vec<usize> = parts.iter().map(|(x, _)| x.id).chain([bias.id]).collect();
        let rg = tape.rg(&ids);
        tape.push(
            value,
            Op::Gate {
                parts: parts.iter().map(|(x, s)| (x.id, *s)).collect(),
                bias: bias.id,
                act,
            },
            "gate",
            rg,
        )
    }

    /// `z ⊙ a + (1 − z) ⊙ b` with `z = self`.
    pub fn blend(&self, a: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(a)?;
        self.same_tape(b)?;
        let value = {
            let (z, av, bv) = (self.value(), a.value(), b.value());
            z.check_same_shape(&av, "blend")?;
            z.check_same_shape(&bv, "blend")?;
            let data = z
                .data()
                .iter()
                .zip(av.data().iter().zip(bv.data()))
                .map(|(z, (a, b))| z * a + (1.0 - z) * b)
                .collect();
            Tensor::new(z.shape(), data)?
        };
        let rg = self.tape.rg(&[self.id, a.id, b.id]);
        self.tape.push(
            value,
            Op::Blend {
                z: self.id,
                a: a.id,
                b: b.id,
            },
            "blend",
            rg,
        )
    }

    /// Columns `start..start + len` of a matrix.
    pub fn channels(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let value = {
            let x = self.value();
            let (rows, c) = x.check_matrix("channels")?;
            if len == 0 || start + len > c {
                return Err(dim_err!("channels: {start}..{} out of {c} columns", start + len));
            }
            let mut data = Vec::with_capacity(rows * len);
            for r in 0..rows {
                data.extend_from_slice(&x.row(r)[start..start + len]);
            }
            Tensor::new(&[rows, len], data)?
        };
        let rg = self.tape.rg(&[self.id]);
        self.tape.push(value, Op::Channels { x: self.id, start }, "channels", rg)
    }
}

/// `K×C_out×C_in` kernels stacked into one `ΣC_out × (K·C_in)` matrix
/// matching the row layout of a basis.
fn flatten_kernels<'a>(kernels: impl Iterator<Item = &'a Tensor>) -> Vec<f64> {
    let mut flat = Vec::new();
    for t in kernels {
        let (order, c_out, c_in) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        for o in 0..c_out {
            for k in 0..order {
                flat.extend_from_slice(&t.data()[(k * c_out + o) * c_in..(k * c_out + o + 1) * c_in]);
            }
        }
    }
    flat
}

/// Addressing of an `R×K×C` basis whose `R = N·B` rows are node-major.
#[derive(Clone, Copy)]
struct BasisLayout {
    n: usize,
    batch: usize,
    width: usize,
    order: usize,
}

impl BasisLayout {
    fn at(&self, row: usize, k: usize) -> usize {
        (row * self.order + k) * self.width
    }

    /// Block `dst` += alpha · operator · block `src`. Zero operator entries
    /// are skipped, so sparse Laplacians cost what their edges cost.
    fn apply(&self, data: &mut [f64], operator: &[f64], dst: usize, src: usize, alpha: f64) {
        debug_assert_ne!(dst, src);
        let w = self.width;
        let stride = self.order * w;
        // Contiguous copy of the source block, `B·W` values per node.
        let span = self.batch * w;
        let mut source = Vec::with_capacity(self.n * span);
        for row in data.chunks_exact(stride) {
            source.extend_from_slice(&row[src * w..(src + 1) * w]);
        }
        for (i, node_rows) in data.chunks_exact_mut(self.batch * stride).enumerate() {
            for (j, &l) in operator[i * self.n..(i + 1) * self.n].iter().enumerate() {
                if l == 0.0 {
                    continue;
                }
                let from = &source[j * span..(j + 1) * span];
                for (row, s) in node_rows.chunks_exact_mut(stride).zip(from.chunks_exact(w)) {
                    axpy(&mut row[dst * w..(dst + 1) * w], alpha * l, s);
                }
            }
        }
    }

    /// Block `dst` = alpha · block `src`.
    fn scaled_copy(&self, data: &mut [f64], dst: usize, src: usize, alpha: f64) {
        for r in 0..self.n * self.batch {
            let (d, s) = (self.at(r, dst), self.at(r, src));
            for e in 0..self.width {
                data[d + e] = alpha * data[s + e];
            }
        }
    }

    /// Block `dst` += alpha · block `src`.
    fn scaled_copy_add(&self, data: &mut [f64], dst: usize, src: usize, alpha: f64) {
        for r in 0..self.n * self.batch {
            let (d, s) = (self.at(r, dst), self.at(r, src));
            for e in 0..self.width {
                data[d + e] += alpha * data[s + e];
            }
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + crate::math::exp(-x))
    } else {
        let e = crate::math::exp(x);
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn hadamard_and_activations() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::vector(vec![3.0, 4.0]).unwrap());
        assert_eq!(a.mul(&b).unwrap().to_tensor().data(), &[3.0, 8.0]);
        let z = tape.constant(Tensor::scalar(0.0));
        assert_eq!(z.sigmoid().unwrap().to_tensor().data(), &[0.5]);
        assert_eq!(z.tanh().unwrap().to_tensor().data(), &[0.0]);
    }

    #[test]
    fn binary_ops_reject_mismatched_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2]));
        let b = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(a.add(&b), Err(Error::Dimension(_))));
        let m = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(m.matmul(&m), Err(Error::Dimension(_))));
    }

    #[test]
    fn backward_sum_and_square() {
        let tape = Tape::new();
        let p = tape.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let loss = p.sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(p).data(), &[1.0, 1.0]);

        let tape = Tape::new();
        let p = tape.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let loss = p.mul(&p).unwrap().sum().unwrap();
        assert_eq!(tape.backward(loss).unwrap().wrt(p).data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar_and_zeroes_unused() {
        let tape = Tape::new();
        let p = tape.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let unused = tape.param(Tensor::zeros(&[3]));
        assert!(matches!(tape.backward(p), Err(Error::Usage(_))));
        let g = tape.backward(p.sum().unwrap()).unwrap();
        assert_eq!(g.wrt(unused).data(), &[0.0; 3]);
    }

    #[test]
    fn concat_channels_shapes_and_gradient() {
        let tape = Tape::new();
        let a = tape.param(t(&[&[1.0]]));
        let b = tape.param(t(&[&[2.0]]));
        assert_eq!(a.concat_channels(&b).unwrap().to_tensor().data(), &[1.0, 2.0]);

        let a = tape.param(Tensor::zeros(&[3, 2]));
        let b = tape.param(Tensor::zeros(&[3, 4]));
        let c = a.concat_channels(&b).unwrap();
        assert_eq!(c.shape(), [3, 6]);
        let g = tape.backward(c.sum().unwrap()).unwrap();
        assert_eq!(g.wrt(a), Tensor::full(&[3, 2], 1.0));
        let bad = tape.param(Tensor::zeros(&[2, 1]));
        assert!(a.concat_channels(&bad).is_err());
    }

    #[test]
    fn segment_reduce_cases() {
        let tape = Tape::new();
        let x = tape.param(t(&[&[1.0], &[3.0]]));
        let max = x.segment_reduce(&[0, 0], 1, Reduce::Max).unwrap();
        assert_eq!(max.to_tensor().data(), &[3.0]);
        let y = tape.param(t(&[&[2.0], &[4.0]]));
        let mean = y.segment_reduce(&[0, 0], 1, Reduce::Mean).unwrap();
        assert_eq!(mean.to_tensor().data(), &[3.0]);

        let z = tape.param(t(&[&[1.5, -2.0], &[0.25, 7.0], &[3.0, 3.0]]));
        for mode in [Reduce::Max, Reduce::Mean] {
            let out = z.segment_reduce(&[0, 1, 2], 3, mode).unwrap();
            assert_eq!(out.to_tensor(), z.to_tensor());
        }
        assert!(matches!(
            z.segment_reduce(&[0, 0, 2], 3, Reduce::Mean),
            Err(Error::Partition(_))
        ));
    }

    #[test]
    fn segment_max_routes_gradient_to_first_maximizer() {
        let tape = Tape::new();
        let x = tape.param(t(&[&[5.0], &[5.0], &[1.0]]));
        let out = x.segment_reduce(&[0, 0, 0], 1, Reduce::Max).unwrap();
        let g = tape.backward(out.sum().unwrap()).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_cases() {
        let tape = Tape::new();
        let gain = tape.constant(Tensor::full(&[2], 1.0));
        let bias = tape.constant(Tensor::zeros(&[2]));
        let h = tape.constant(t(&[&[1.0, 3.0], &[4.0, 4.0]]));
        let out = h.layer_norm(&gain, &bias).unwrap().to_tensor();
        // mean 2, population variance 1: (x − 2)/sqrt(1 + 1e-5)
        assert!((out.at(0, 0) + 1.0).abs() < 1e-4);
        assert!((out.at(0, 1) - 1.0).abs() < 1e-4);
        assert_eq!(out.row(1), &[0.0, 0.0]);

        let g1 = tape.constant(Tensor::full(&[1], 1.0));
        let b1 = tape.constant(Tensor::zeros(&[1]));
        let single = tape.constant(t(&[&[42.0]]));
        assert_eq!(single.layer_norm(&g1, &b1).unwrap().to_tensor().data(), &[0.0]);
    }

    #[test]
    fn non_finite_values_are_errors() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::scalar(f64::MAX));
        assert!(matches!(x.scale(10.0), Err(Error::NonFinite("affine"))));
    }

    #[test]
    fn gather_and_stack_rows() {
        let tape = Tape::new();
        let a = tape.param(t(&[&[1.0, 2.0]]));
        let b = tape.param(t(&[&[3.0, 4.0], &[5.0, 6.0]]));
        let s = Var::stack_rows(&[a, b]).unwrap();
        assert_eq!(s.shape(), [3, 2]);
        let gathered = s.gather_rows(&[2, 0, 2]).unwrap();
        assert_eq!(gathered.to_tensor().data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let g = tape.backward(gathered.sum().unwrap()).unwrap();
        assert_eq!(g.wrt(a).data(), &[1.0, 1.0]);
        assert_eq!(g.wrt(b).data(), &[0.0, 0.0, 2.0, 2.0]);
    }
}
