use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::kernels::{self, MatRef, NormStats};
use super::Tensor;
use crate::error::{Error, Result};

enum Op {
    Leaf,
    MatMul { a: usize, b: usize, trans_b: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow { a: usize, bias: usize },
    Scale { a: usize, s: f64 },
    Gelu(usize),
    Sigmoid(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        stats: NormStats,
    },
    Softmax(usize),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        probs: Rc<Vec<f64>>,
    },
    SliceRows { a: usize, start: usize },
    ConcatRows(Vec<usize>),
    SliceCols { a: usize, start: usize },
    ConcatCols(Vec<usize>),
    GatherRows { a: usize, idx: Vec<usize> },
    ScatterRows { a: usize, idx: Vec<usize> },
    Sum(usize),
    Mean(usize),
    BceLogits { a: usize, target: Vec<f64> },
    L1 { a: usize, target: Vec<f64> },
    Reshape(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Gradient tape. Single-threaded; dropped after each step, which frees the graph.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    nonfinite: Cell<Option<&'static str>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of leaf nodes after [`Tape::backward`].
pub struct Grads {
    slots: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var<'_>) -> Option<&[f64]> {
        self.slots.get(v.id).and_then(|s| s.as_deref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, t: Tensor) -> Var<'_> {
        self.leaf(t, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.leaf(t, false)
    }

    pub fn leaf(&self, t: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(t, Op::Leaf, requires_grad, "leaf")
    }

    /// First op (if any) that produced a NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.nonfinite.get() {
            Some(op) => Err(Error::NonFinite { op }),
            None => Ok(()),
        }
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Var<'_> {
        if self.nonfinite.get().is_none() && !value.all_finite() {
            self.nonfinite.set(Some(name));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let cols = vals[0].cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for v in &vals {
            assert_eq!(v.rank(), 2, "concat_rows expects 2-D inputs");
            assert_eq!(v.cols(), cols, "concat_rows channel mismatch");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let needs = parts.iter().any(|p| self.needs(p.id));
        self.push(
            Tensor::from_parts(vec![rows, cols], data),
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
            needs,
            "concat_rows",
        )
    }

    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let rows = vals[0].rows();
        for v in &vals {
            assert_eq!(v.rank(), 2, "concat_cols expects 2-D inputs");
            assert_eq!(v.rows(), rows, "concat_cols row mismatch");
        }
        let cols: usize = vals.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for v in &vals {
                data.extend_from_slice(v.row(r));
            }
        }
        let needs = parts.iter().any(|p| self.needs(p.id));
        self.push(
            Tensor::from_parts(vec![rows, cols], data),
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
            needs,
            "concat_cols",
        )
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Grads> {
        self.check_finite()?;
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut slots: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        slots[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = slots[id].take() else {
                continue;
            };
            propagate(&nodes, node, &g, &mut slots);
            if matches!(node.op, Op::Leaf) {
                slots[id] = Some(g);
            }
        }
        // Leaves that require a gradient but were not reached get zeros.
        for (id, node) in nodes.iter().enumerate() {
            if node.needs_grad && matches!(node.op, Op::Leaf) && slots[id].is_none() {
                slots[id] = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(Grads { slots })
    }

    /// Attention probabilities (`[heads, nq, nk]`) recorded by an attention node.
    pub fn attention_probs(&self, v: Var<'_>) -> Option<Rc<Vec<f64>>> {
        match &self.nodes.borrow()[v.id].op {
            Op::Attention { probs, .. } => Some(probs.clone()),
            _ => None,
        }
    }
}

fn slot(slots: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
    slots[id].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], slots: &mut [Option<Vec<f64>>]) {
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    let needs = |id: usize| nodes[id].needs_grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, trans_b } => {
            let av = val(*a);
            let bv = val(*b);
            let (m, k) = (av.rows(), av.cols());
            let n = node.value.cols();
            if needs(*a) {
                let da = slot(slots, *a, m * k);
                let bref = if *trans_b {
                    MatRef::dense(bv.data(), k)
                } else {
                    MatRef::dense_t(bv.data(), n)
                };
                kernels::gemm(m, n, k, MatRef::dense(g, n), bref, 1.0, da, 0, k);
            }
            if needs(*b) {
                let db = slot(slots, *b, k * n);
                if *trans_b {
                    kernels::gemm(
                        n,
                        m,
                        k,
                        MatRef::dense_t(g, n),
                        MatRef::dense(av.data(), k),
                        1.0,
                        db,
                        0,
                        k,
                    );
                } else {
                    kernels::gemm(
                        k,
                        m,
                        n,
                        MatRef::dense_t(av.data(), k),
                        MatRef::dense(g, n),
                        1.0,
                        db,
                        0,
                        n,
                    );
                }
            }
        }
        Op::Add(a, b) => {
            for p in [*a, *b] {
                if needs(p) {
                    add_into(slot(slots, p, g.len()), g);
                }
            }
        }
        Op::Sub(a, b) => {
            if needs(*a) {
                add_into(slot(slots, *a, g.len()), g);
            }
            if needs(*b) {
                let db = slot(slots, *b, g.len());
                db.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
            }
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                let bv = val(*b).data();
                let da = slot(slots, *a, g.len());
                for i in 0..g.len() {
                    da[i] += g[i] * bv[i];
                }
            }
            if needs(*b) {
                let av = val(*a).data();
                let db = slot(slots, *b, g.len());
                for i in 0..g.len() {
                    db[i] += g[i] * av[i];
                }
            }
        }
        Op::AddRow { a, bias } => {
            if needs(*a) {
                add_into(slot(slots, *a, g.len()), g);
            }
            if needs(*bias) {
                let cols = node.value.cols();
                let db = slot(slots, *bias, cols);
                for row in g.chunks(cols) {
                    add_into(db, row);
                }
            }
        }
        Op::Scale { a, s } => {
            if needs(*a) {
                let da = slot(slots, *a, g.len());
                da.iter_mut().zip(g).for_each(|(d, v)| *d += s * v);
            }
        }
        Op::Gelu(a) => {
            if needs(*a) {
                let x = val(*a).data();
                let da = slot(slots, *a, g.len());
                for i in 0..g.len() {
                    da[i] += g[i] * kernels::gelu_grad(x[i]);
                }
            }
        }
        Op::Sigmoid(a) => {
            if needs(*a) {
                let y = node.value.data();
                let da = slot(slots, *a, g.len());
                for i in 0..g.len() {
                    da[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            stats,
        } => {
            let xv = val(*x).data();
            let gm = val(*gamma).data();
            let cols = node.value.cols();
            let rows = if cols == 0 { 0 } else { g.len() / cols };
            let mut dgamma = vec![0.0; cols];
            let mut dbeta = vec![0.0; cols];
            let mut dx = vec![0.0; g.len()];
            let mut xhat = vec![0.0; cols];
            let mut dxhat = vec![0.0; cols];
            for r in 0..rows {
                let (mu, rs) = (stats.mean[r], stats.rstd[r]);
                let gr = &g[r * cols..(r + 1) * cols];
                let xr = &xv[r * cols..(r + 1) * cols];
                let mut mean_dxhat = 0.0;
                let mut mean_dxhat_xhat = 0.0;
                for j in 0..cols {
                    xhat[j] = (xr[j] - mu) * rs;
                    dgamma[j] += gr[j] * xhat[j];
                    dbeta[j] += gr[j];
                    dxhat[j] = gr[j] * gm[j];
                    mean_dxhat += dxhat[j];
                    mean_dxhat_xhat += dxhat[j] * xhat[j];
                }
                mean_dxhat /= cols as f64;
                mean_dxhat_xhat /= cols as f64;
                let dxr = &mut dx[r * cols..(r + 1) * cols];
                for j in 0..cols {
                    dxr[j] = rs * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                }
            }
            if needs(*x) {
                add_into(slot(slots, *x, g.len()), &dx);
            }
            if needs(*gamma) {
                add_into(slot(slots, *gamma, cols), &dgamma);
            }
            if needs(*beta) {
                add_into(slot(slots, *beta, cols), &dbeta);
            }
        }
        Op::Softmax(a) => {
            if needs(*a) {
                let y = node.value.data();
                let cols = node.value.cols();
                let da = slot(slots, *a, g.len());
                for (r, (yr, gr)) in y.chunks(cols).zip(g.chunks(cols)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..cols {
                        da[r * cols + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            probs,
        } => {
            let (qv, kv, vv) = (val(*q), val(*k), val(*v));
            let (nq, c) = (qv.rows(), qv.cols());
            let nk = kv.rows();
            let mut dq = needs(*q).then(|| vec![0.0; nq * c]);
            let mut dk = needs(*k).then(|| vec![0.0; nk * c]);
            let mut dv = needs(*v).then(|| vec![0.0; nk * c]);
            kernels::attention_backward(
                g,
                qv.data(),
                kv.data(),
                vv.data(),
                probs,
                nq,
                nk,
                c,
                *heads,
                dq.as_deref_mut(),
                dk.as_deref_mut(),
                dv.as_deref_mut(),
            );
            for (id, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                if let Some(d) = d {
                    add_into(slot(slots, id, d.len()), &d);
                }
            }
        }
        Op::SliceRows { a, start } => {
            if needs(*a) {
                let cols = node.value.cols();
                let len = val(*a).len();
                let da = slot(slots, *a, len);
                add_into(&mut da[start * cols..start * cols + g.len()], g);
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let n = val(p).len();
                if needs(p) {
                    add_into(slot(slots, p, n), &g[off..off + n]);
                }
                off += n;
            }
        }
        Op::SliceCols { a, start } => {
            if needs(*a) {
                let av = val(*a);
                let (rows, acols) = (av.rows(), av.cols());
                let cols = node.value.cols();
                let da = slot(slots, *a, av.len());
                for r in 0..rows {
                    add_into(
                        &mut da[r * acols + start..r * acols + start + cols],
                        &g[r * cols..(r + 1) * cols],
                    );
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.value.cols();
            let rows = node.value.rows();
            let mut off = 0;
            for &p in parts {
                let pv = val(p);
                let cols = pv.cols();
                if needs(p) {
                    let dp = slot(slots, p, pv.len());
                    for r in 0..rows {
                        add_into(
                            &mut dp[r * cols..(r + 1) * cols],
                            &g[r * total + off..r * total + off + cols],
                        );
                    }
                }
                off += cols;
            }
        }
        Op::GatherRows { a, idx } => {
            if needs(*a) {
                let cols = node.value.cols();
                let len = val(*a).len();
                let da = slot(slots, *a, len);
                for (i, &src) in idx.iter().enumerate() {
                    add_into(
                        &mut da[src * cols..(src + 1) * cols],
                        &g[i * cols..(i + 1) * cols],
                    );
                }
            }
        }
        Op::ScatterRows { a, idx } => {
            if needs(*a) {
                let cols = node.value.cols();
                let len = val(*a).len();
                let da = slot(slots, *a, len);
                for (i, &dst) in idx.iter().enumerate() {
                    add_into(
                        &mut da[i * cols..(i + 1) * cols],
                        &g[dst * cols..(dst + 1) * cols],
                    );
                }
            }
        }
        Op::Sum(a) => {
            if needs(*a) {
                let n = val(*a).len();
                slot(slots, *a, n).iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(a) => {
            if needs(*a) {
                let n = val(*a).len();
                let s = g[0] / n as f64;
                slot(slots, *a, n).iter_mut().for_each(|d| *d += s);
            }
        }
        Op::BceLogits { a, target } => {
            if needs(*a) {
                let z = val(*a).data();
                let n = z.len() as f64;
                let da = slot(slots, *a, z.len());
                for i in 0..z.len() {
                    da[i] += g[0] * (kernels::sigmoid(z[i]) - target[i]) / n;
                }
            }
        }
        Op::L1 { a, target } => {
            if needs(*a) {
                let x = val(*a).data();
                let n = x.len() as f64;
                let da = slot(slots, *a, x.len());
                for i in 0..x.len() {
                    let d = x[i] - target[i];
                    let s = if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    da[i] += g[0] * s / n;
                }
            }
        }
        Op::Reshape(a) => {
            if needs(*a) {
                add_into(slot(slots, *a, g.len()), g);
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    /// Owned copy of the current value.
    pub fn to_tensor(&self) -> Tensor {
        (*self.value()).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.value().rows()
    }

    pub fn cols(&self) -> usize {
        self.value().cols()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    /// Same value as a constant leaf; gradients stop here.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.to_tensor())
    }

    fn unary(&self, value: Tensor, op: Op, name: &'static str) -> Var<'t> {
        let needs = self.requires_grad();
        self.tape.push(value, op, needs, name)
    }

    fn binary(&self, other: &Var<'t>, value: Tensor, op: Op, name: &'static str) -> Var<'t> {
        let needs = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, needs, name)
    }

    /// `self [m,k] x other [k,n]`.
    pub fn matmul(&self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert!(a.rank() == 2 && b.rank() == 2, "matmul expects 2-D operands");
        assert_eq!(a.cols(), b.rows(), "matmul inner extent mismatch");
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let out = kernels::matmul(a.data(), b.data(), m, k, n);
        self.binary(
            &other,
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul {
                a: self.id,
                b: other.id,
                trans_b: false,
            },
            "matmul",
        )
    }

    /// `self [m,k] x other[n,k]^T`.
    pub fn matmul_t(&self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert!(a.rank() == 2 && b.rank() == 2, "matmul_t expects 2-D operands");
        assert_eq!(a.cols(), b.cols(), "matmul_t inner extent mismatch");
        let (m, k, n) = (a.rows(), a.cols(), b.rows());
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            MatRef::dense(a.data(), k),
            MatRef::dense_t(b.data(), k),
            0.0,
            &mut out,
            0,
            n,
        );
        self.binary(
            &other,
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul {
                a: self.id,
                b: other.id,
                trans_b: true,
            },
            "matmul_t",
        )
    }

    fn zip_with(&self, other: &Var<'t>, f: impl Fn(f64, f64) -> f64, name: &'static str) -> Tensor {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "{name}: shape mismatch");
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::from_parts(a.shape().to_vec(), data)
    }

    pub fn add(&self, other: Var<'t>) -> Var<'t> {
        let v = self.zip_with(&other, |a, b| a + b, "add");
        self.binary(&other, v, Op::Add(self.id, other.id), "add")
    }

    pub fn sub(&self, other: Var<'t>) -> Var<'t> {
        let v = self.zip_with(&other, |a, b| a - b, "sub");
        self.binary(&other, v, Op::Sub(self.id, other.id), "sub")
    }

    pub fn mul(&self, other: Var<'t>) -> Var<'t> {
        let v = self.zip_with(&other, |a, b| a * b, "mul");
        self.binary(&other, v, Op::Mul(self.id, other.id), "mul")
    }

    /// Adds a `[cols]` vector to every row.
    pub fn add_row(&self, bias: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), bias.value());
        let cols = a.cols();
        assert_eq!(b.len(), cols, "add_row: bias length mismatch");
        let mut data = a.data().to_vec();
        for row in data.chunks_mut(cols.max(1)) {
            add_into(row, b.data());
        }
        self.binary(
            &bias,
            Tensor::from_parts(a.shape().to_vec(), data),
            Op::AddRow {
                a: self.id,
                bias: bias.id,
            },
            "add_row",
        )
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let a = self.value();
        let data = a.data().iter().map(|v| v * s).collect();
        self.unary(
            Tensor::from_parts(a.shape().to_vec(), data),
            Op::Scale { a: self.id, s },
            "scale",
        )
    }

    pub fn gelu(&self) -> Var<'t> {
        let a = self.value();
        let data = a.data().iter().map(|&v| kernels::gelu(v)).collect();
        self.unary(
            Tensor::from_parts(a.shape().to_vec(), data),
            Op::Gelu(self.id),
            "gelu",
        )
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let a = self.value();
        let data = a.data().iter().map(|&v| kernels::sigmoid(v)).collect();
        self.unary(
            Tensor::from_parts(a.shape().to_vec(), data),
            Op::Sigmoid(self.id),
            "sigmoid",
        )
    }

    pub fn softmax_rows(&self) -> Var<'t> {
        let a = self.value();
        let mut data = a.data().to_vec();
        kernels::softmax_rows_inplace(&mut data, a.cols());
        self.unary(
            Tensor::from_parts(a.shape().to_vec(), data),
            Op::Softmax(self.id),
            "softmax_rows",
        )
    }

    /// Row-wise layer norm with affine parameters.
    pub fn layer_norm(&self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Var<'t> {
        let (x, gm, bt) = (self.value(), gamma.value(), beta.value());
        let cols = x.cols();
        assert!(
            gm.len() == cols && bt.len() == cols,
            "layer_norm: affine length mismatch"
        );
        let (out, stats) = kernels::layer_norm_forward(x.data(), cols, gm.data(), bt.data(), eps);
        let needs = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        self.tape.push(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                stats,
            },
            needs,
            "layer_norm",
        )
    }

    /// Multi-head scaled dot-product attention with `self` as queries.
    pub fn attention(&self, k: Var<'t>, v: Var<'t>, heads: usize) -> Var<'t> {
        let (qv, kv, vv) = (self.value(), k.value(), v.value());
        let c = qv.cols();
        assert!(heads >= 1 && c % heads == 0, "attention: {c} channels not divisible by {heads} heads");
        assert!(kv.cols() == c && vv.cols() == c, "attention: channel mismatch");
        assert_eq!(kv.rows(), vv.rows(), "attention: key/value length mismatch");
        let (nq, nk) = (qv.rows(), kv.rows());
        let (out, probs) =
            kernels::attention_forward(qv.data(), kv.data(), vv.data(), nq, nk, c, heads);
        let needs = self.requires_grad() || k.requires_grad() || v.requires_grad();
        self.tape.push(
            Tensor::from_parts(vec![nq, c], out),
            Op::Attention {
                q: self.id,
                k: k.id,
                v: v.id,
                heads,
                probs: Rc::new(probs),
            },
            needs,
            "attention",
        )
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Var<'t> {
        let a = self.value();
        assert!(start + len <= a.rows(), "slice_rows out of range");
        let cols = a.cols();
        let data = a.data()[start * cols..(start + len) * cols].to_vec();
        self.unary(
            Tensor::from_parts(vec![len, cols], data),
            Op::SliceRows { a: self.id, start },
            "slice_rows",
        )
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Var<'t> {
        let a = self.value();
        let cols = a.cols();
        assert!(start + len <= cols, "slice_cols out of range");
        let mut data = Vec::with_capacity(a.rows() * len);
        for r in 0..a.rows() {
            data.extend_from_slice(&a.row(r)[start..start + len]);
        }
        self.unary(
            Tensor::from_parts(vec![a.rows(), len], data),
            Op::SliceCols { a: self.id, start },
            "slice_cols",
        )
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Var<'t> {
        let a = self.value();
        let cols = a.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            assert!(i < a.rows(), "gather_rows index out of range");
            data.extend_from_slice(a.row(i));
        }
        self.unary(
            Tensor::from_parts(vec![idx.len(), cols], data),
            Op::GatherRows {
                a: self.id,
                idx: idx.to_vec(),
            },
            "gather_rows",
        )
    }

    /// Places row `i` at row `idx[i]` of a zero `[total, cols]` tensor.
    pub fn scatter_rows(&self, idx: &[usize], total: usize) -> Var<'t> {
        let a = self.value();
        assert_eq!(idx.len(), a.rows(), "scatter_rows: index count mismatch");
        let cols = a.cols();
        let mut data = vec![0.0; total * cols];
        for (i, &dst) in idx.iter().enumerate() {
            assert!(dst < total, "scatter_rows index out of range");
            data[dst * cols..(dst + 1) * cols].copy_from_slice(a.row(i));
        }
        self.unary(
            Tensor::from_parts(vec![total, cols], data),
            Op::ScatterRows {
                a: self.id,
                idx: idx.to_vec(),
            },
            "scatter_rows",
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t> {
        let a = self.value();
        assert_eq!(
            shape.iter().product::<usize>(),
            a.len(),
            "reshape: element count mismatch"
        );
        self.unary(
            Tensor::from_parts(shape.to_vec(), a.data().to_vec()),
            Op::Reshape(self.id),
            "reshape",
        )
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id), "sum")
    }

    pub fn mean(&self) -> Var<'t> {
        let a = self.value();
        let s = a.data().iter().sum::<f64>() / a.len() as f64;
        self.unary(Tensor::scalar(s), Op::Mean(self.id), "mean")
    }

    /// Mean binary cross-entropy of logits against soft targets in `[0,1]`.
    pub fn bce_with_logits(&self, target: &[f64]) -> Var<'t> {
        let z = self.value();
        assert_eq!(z.len(), target.len(), "bce_with_logits: target length mismatch");
        let total: f64 = z
            .data()
            .iter()
            .zip(target)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        self.unary(
            Tensor::scalar(total / z.len() as f64),
            Op::BceLogits {
                a: self.id,
                target: target.to_vec(),
            },
            "bce_with_logits",
        )
    }

    /// Mean absolute difference against a constant target.
    pub fn l1(&self, target: &[f64]) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.len(), target.len(), "l1: target length mismatch");
        let total: f64 = x.data().iter().zip(target).map(|(a, b)| (a - b).abs()).sum();
        self.unary(
            Tensor::scalar(total / x.len() as f64),
            Op::L1 {
                a: self.id,
                target: target.to_vec(),
            },
            "l1",
        )
    }
}

/// Binds parameter tensors to leaves of one tape, once each.
///
/// Parameters are identified by address, so the owning model must not move
/// while a binder is alive.
pub struct Binder<'t> {
    tape: &'t Tape,
    trainable: bool,
    bound: RefCell<HashMap<*const Tensor, Var<'t>>>,
}

impl<'t> Binder<'t> {
    pub fn new(tape: &'t Tape, trainable: bool) -> Self {
        Self {
            tape,
            trainable,
            bound: RefCell::new(HashMap::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn param(&self, t: &Tensor) -> Var<'t> {
        let key = t as *const Tensor;
        if let Some(v) = self.bound.borrow().get(&key) {
            return *v;
        }
        let v = self.tape.leaf(t.clone(), self.trainable);
        self.bound.borrow_mut().insert(key, v);
        v
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    /// Gradient for a parameter; zeros when it never entered the graph.
    pub fn grad_of(&self, grads: &Grads, t: &Tensor) -> Vec<f64> {
        self.bound
            .borrow()
            .get(&(t as *const Tensor))
            .and_then(|v| grads.get(*v).map(<[f64]>::to_vec))
            .unwrap_or_else(|| vec![0.0; t.len()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.param(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let loss = x.sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.param(Tensor::ones(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreferenced_leaf_gets_zero_grad() {
        let tape = Tape::new();
        let x = tape.param(Tensor::ones(&[3]));
        let y = tape.param(Tensor::ones(&[2]));
        let g = tape.backward(x.sum()).unwrap();
        assert_eq!(g.get(y).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn non_finite_value_poisons_tape() {
        let tape = Tape::new();
        let x = tape.param(Tensor::from_rows(&[&[1e308, 1e308]]).unwrap());
        let y = x.scale(10.0).sum();
        assert!(matches!(
            tape.backward(y),
            Err(Error::NonFinite { op: "scale" })
        ));
    }

    #[test]
    fn scatter_then_gather_round_trips() {
        let tape = Tape::new();
        let x = tape.param(Tensor::from_rows(&[&[1.0], &[2.0]]).unwrap());
        let s = x.scatter_rows(&[0, 2], 3);
        assert_eq!(s.value().data(), &[1.0, 0.0, 2.0]);
        let back = s.gather_rows(&[0, 2]);
        assert_eq!(back.value().data(), x.value().data());
    }

    #[test]
    fn binder_reuses_leaf_for_same_tensor() {
        let w = Tensor::ones(&[2]);
        let tape = Tape::new();
        let bx = Binder::new(&tape, true);
        let a = bx.param(&w);
        let b = bx.param(&w);
        assert_eq!(a.id(), b.id());
        let g = tape.backward(a.add(b).sum()).unwrap();
        assert_eq!(bx.grad_of(&g, &w), vec![2.0, 2.0]);
    }
}
