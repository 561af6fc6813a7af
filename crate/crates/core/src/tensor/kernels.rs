//! Raw slice kernels shared by the tape and the checked functional API.

/// Strided view of a row-major (or transposed) matrix operand.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    /// Contiguous `rows x cols` matrix.
    pub fn dense(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Transpose of a contiguous matrix with `cols` columns.
    pub fn dense_t(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            row_stride: 1,
            col_stride: cols,
        }
    }

    pub fn with_offset(mut self, offset: usize) -> Self {
        self.offset = offset;
        self
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows == 0 || cols == 0 {
            return;
        }
        let last = self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride;
        assert!(last < self.data.len(), "matrix view out of bounds");
    }
}

/// `c = beta * c + a * b` where `a` is `m x k`, `b` is `k x n` and the
/// output is written with row stride `c_row_stride` starting at `c_offset`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f64,
    c: &mut [f64],
    c_offset: usize,
    c_row_stride: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c_offset + (m - 1) * c_row_stride + n <= c.len(), "gemm output out of bounds");
    if k == 0 {
        for i in 0..m {
            let row = &mut c[c_offset + i * c_row_stride..c_offset + i * c_row_stride + n];
            if beta == 0.0 {
                row.fill(0.0);
            } else {
                row.iter_mut().for_each(|v| *v *= beta);
            }
        }
        return;
    }
    a.check(m, k);
    b.check(k, n);
    // SAFETY: bounds of every operand were checked above against the
    // strides handed to the kernel.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr().add(a.offset),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b.offset),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr().add(c_offset),
            c_row_stride as isize,
            1,
        );
    }
}

/// Dense `[m,k] x [k,n]` product into a fresh buffer.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm(
        m,
        k,
        n,
        MatRef::dense(a, k),
        MatRef::dense(b, n),
        0.0,
        &mut out,
        0,
        n,
    );
    out
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows_inplace(data: &mut [f64], cols: usize) {
    if cols == 0 {
        return;
    }
    for row in data.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Per-row statistics saved by the layer-norm forward for its backward.
#[derive(Clone, Debug)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub fn layer_norm_forward(
    x: &[f64],
    cols: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, NormStats) {
    let rows = if cols == 0 { 0 } else { x.len() / cols };
    let mut out = vec![0.0; x.len()];
    let mut mean = Vec::with_capacity(rows);
    let mut rstd = Vec::with_capacity(rows);
    for (r, row) in x.chunks(cols.max(1)).enumerate().take(rows) {
        let mu = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
        let rs = 1.0 / (var + eps).sqrt();
        let o = &mut out[r * cols..(r + 1) * cols];
        for j in 0..cols {
            o[j] = (row[j] - mu) * rs * gamma[j] + beta[j];
        }
        mean.push(mu);
        rstd.push(rs);
    }
    (out, NormStats { mean, rstd })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Multi-head scaled dot-product attention forward.
///
/// `q` is `[nq, c]`, `k` and `v` are `[nk, c]`; heads split the channel
/// axis evenly. Returns the output and the per-head probabilities laid out
/// as `[heads, nq, nk]`.
pub fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    nq: usize,
    nk: usize,
    c: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>) {
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; nq * c];
    let mut probs = vec![0.0; heads * nq * nk];
    for h in 0..heads {
        let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
        gemm(
            nq,
            dh,
            nk,
            MatRef::dense(q, c).with_offset(h * dh),
            MatRef::dense_t(k, c).with_offset(h * dh),
            0.0,
            p,
            0,
            nk,
        );
        p.iter_mut().for_each(|s| *s *= scale);
        softmax_rows_inplace(p, nk);
        gemm(
            nq,
            nk,
            dh,
            MatRef::dense(p, nk),
            MatRef::dense(v, c).with_offset(h * dh),
            0.0,
            &mut out,
            h * dh,
            c,
        );
    }
    (out, probs)
}

/// Backward of [`attention_forward`]; accumulates into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    dout: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    nq: usize,
    nk: usize,
    c: usize,
    heads: usize,
    dq: Option<&mut [f64]>,
    dk: Option<&mut [f64]>,
    dv: Option<&mut [f64]>,
) {
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = dq;
    let mut dk = dk;
    let mut dv = dv;
    let mut dp = vec![0.0; nq * nk];
    for h in 0..heads {
        let p = &probs[h * nq * nk..(h + 1) * nq * nk];
        if let Some(dv) = dv.as_deref_mut() {
            gemm(
                nk,
                nq,
                dh,
                MatRef::dense_t(p, nk),
                MatRef::dense(dout, c).with_offset(h * dh),
                1.0,
                dv,
                h * dh,
                c,
            );
        }
        if dq.is_none() && dk.is_none() {
            continue;
        }
        gemm(
            nq,
            dh,
            nk,
            MatRef::dense(dout, c).with_offset(h * dh),
            MatRef::dense_t(v, c).with_offset(h * dh),
            0.0,
            &mut dp,
            0,
            nk,
        );
        for i in 0..nq {
            let prow = &p[i * nk..(i + 1) * nk];
            let drow = &mut dp[i * nk..(i + 1) * nk];
            let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
            for j in 0..nk {
                drow[j] = prow[j] * (drow[j] - dot) * scale;
            }
        }
        if let Some(dq) = dq.as_deref_mut() {
            gemm(
                nq,
                nk,
                dh,
                MatRef::dense(&dp, nk),
                MatRef::dense(k, c).with_offset(h * dh),
                1.0,
                dq,
                h * dh,
                c,
            );
        }
        if let Some(dk) = dk.as_deref_mut() {
            gemm(
                nk,
                nq,
                dh,
                MatRef::dense_t(&dp, nk),
                MatRef::dense(q, c).with_offset(h * dh),
                1.0,
                dk,
                h * dh,
                c,
            );
        }
    }
}
