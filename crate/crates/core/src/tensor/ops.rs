//! Parameter blocks and the shape-checked functional entry points.
//!
//! The functions here validate shapes up front and report a
//! [`Error::Dimension`] instead of panicking; they then run the same tape ops
//! used during training, on a gradient-free tape.

use rand::Rng;

use super::{Binder, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Epsilon used by every layer norm in the model.
pub const LN_EPS: f64 = 1e-6;

/// Anything that owns named parameter tensors.
pub trait Parameterized {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl LinearParams {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(Error::dim("LinearParams", "weight must be 2-D"));
        }
        if let Some(b) = &bias {
            if b.len() != weight.cols() {
                return Err(Error::dim(
                    "LinearParams",
                    format!("bias length {} != out {}", b.len(), weight.cols()),
                ));
            }
        }
        if !weight.all_finite() || bias.as_ref().is_some_and(|b| !b.all_finite()) {
            return Err(Error::NonFinite { op: "LinearParams" });
        }
        Ok(Self { weight, bias })
    }

    /// Xavier-uniform weight, zero bias.
    pub fn init<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        Self {
            weight: Tensor::uniform(&[input, output], bound, rng),
            bias: Some(Tensor::zeros(&[output])),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[input, output]),
            bias: Some(Tensor::zeros(&[output])),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward<'t>(&self, bx: &Binder<'t>, x: Var<'t>) -> Var<'t> {
        let y = x.matmul(bx.param(&self.weight));
        match &self.bias {
            Some(b) => y.add_row(bx.param(b)),
            None => y,
        }
    }

    pub fn zero_(&mut self) {
        self.weight.data_mut().fill(0.0);
        if let Some(b) = &mut self.bias {
            b.data_mut().fill(0.0);
        }
    }
}

impl Parameterized for LinearParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[dim]),
            beta: Tensor::zeros(&[dim]),
        }
    }

    pub fn forward<'t>(&self, bx: &Binder<'t>, x: Var<'t>) -> Var<'t> {
        x.layer_norm(bx.param(&self.gamma), bx.param(&self.beta), LN_EPS)
    }
}

impl Parameterized for LayerNormParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// Two linear layers with GELU between.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl MlpParams {
    pub fn hidden_dim(dim: usize, ratio: f64) -> Result<usize> {
        let hidden = (ratio * dim as f64).round();
        if !(hidden >= 1.0) {
            return Err(Error::config(format!(
                "mlp hidden size round({ratio}*{dim}) must be >= 1"
            )));
        }
        Ok(hidden as usize)
    }

    pub fn init<R: Rng>(dim: usize, ratio: f64, rng: &mut R) -> Result<Self> {
        let hidden = Self::hidden_dim(dim, ratio)?;
        Ok(Self {
            fc1: LinearParams::init(dim, hidden, rng),
            fc2: LinearParams::init(hidden, dim, rng),
        })
    }

    pub fn forward<'t>(&self, bx: &Binder<'t>, x: Var<'t>) -> Var<'t> {
        let h = self.fc1.forward(bx, x).gelu();
        self.fc2.forward(bx, h)
    }
}

impl Parameterized for MlpParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

fn require_2d(op: &'static str, x: &Tensor) -> Result<()> {
    if x.rank() != 2 {
        return Err(Error::dim(op, format!("expected 2-D input, got {:?}", x.shape())));
    }
    Ok(())
}

fn finish(tape: &Tape, out: Var<'_>) -> Result<Tensor> {
    tape.check_finite()?;
    Ok(out.to_tensor())
}

fn check_linear(op: &'static str, x: &Tensor, p: &LinearParams) -> Result<()> {
    require_2d(op, x)?;
    if x.cols() != p.in_dim() {
        return Err(Error::dim(
            op,
            format!("input has {} features, weight expects {}", x.cols(), p.in_dim()),
        ));
    }
    if let Some(b) = &p.bias {
        if b.len() != p.out_dim() {
            return Err(Error::dim(op, "bias length != out"));
        }
    }
    Ok(())
}

/// `x W + b` for `x: [N, in]`.
pub fn linear(x: &Tensor, p: &LinearParams) -> Result<Tensor> {
    check_linear("linear", x, p)?;
    let tape = Tape::new();
    let bx = Binder::new(&tape, false);
    let out = p.forward(&bx, tape.constant(x.clone()));
    finish(&tape, out)
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    require_2d("softmax_rows", x)?;
    if !x.all_finite() {
        return Err(Error::NonFinite { op: "softmax_rows" });
    }
    let tape = Tape::new();
    let out = tape.constant(x.clone()).softmax_rows();
    finish(&tape, out)
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    require_2d("layer_norm", x)?;
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::dim("layer_norm", "gamma/beta length != D"));
    }
    if d <= 1 && eps <= 0.0 {
        return Err(Error::Singular {
            op: "layer_norm",
            detail: format!("D = {d} with eps = {eps} has zero variance"),
        });
    }
    let tape = Tape::new();
    let out = tape.constant(x.clone()).layer_norm(
        tape.constant(gamma.clone()),
        tape.constant(beta.clone()),
        eps,
    );
    finish(&tape, out)
}

pub fn gelu_tanh(x: f64) -> f64 {
    super::kernels::gelu(x)
}

pub fn mlp_block(x: &Tensor, p: &MlpParams) -> Result<Tensor> {
    check_linear("mlp_block", x, &p.fc1)?;
    if p.fc2.in_dim() != p.fc1.out_dim() || p.fc2.out_dim() != x.cols() {
        return Err(Error::dim("mlp_block", "fc2 shape does not close the block"));
    }
    let tape = Tape::new();
    let bx = Binder::new(&tape, false);
    let out = p.forward(&bx, tape.constant(x.clone()));
    finish(&tape, out)
}

/// Single-head `softmax(q k^T / sqrt(C)) v`.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    for t in [q, k, v] {
        require_2d("scaled_dot_attention", t)?;
    }
    if q.cols() == 0 || k.cols() != q.cols() || v.cols() != q.cols() {
        return Err(Error::dim(
            "scaled_dot_attention",
            format!(
                "channel extents q={} k={} v={}",
                q.cols(),
                k.cols(),
                v.cols()
            ),
        ));
    }
    if k.rows() != v.rows() || k.rows() == 0 {
        return Err(Error::dim("scaled_dot_attention", "key/value lengths differ or are empty"));
    }
    let tape = Tape::new();
    let out = tape
        .constant(q.clone())
        .attention(tape.constant(k.clone()), tape.constant(v.clone()), 1);
    finish(&tape, out)
}
