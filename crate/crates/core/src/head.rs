//! Box and confidence prediction from the two restored search sequences.

use rand::Rng;

use crate::config::{Config, Grid};
use crate::embedding::VarSeq;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::kernels::sigmoid;
use crate::tensor::ops::{join, Parameterized};
use crate::tensor::{Binder, LayerNormParams, LinearParams, Tensor, Var};

/// Pointwise two-layer map applied to every search cell.
#[derive(Clone, Debug, PartialEq)]
pub struct PointwiseHead {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl PointwiseHead {
    pub fn init<R: Rng>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        Self {
            fc1: LinearParams::init(input, hidden, rng),
            fc2: LinearParams::init(hidden, output, rng),
        }
    }

    pub fn forward<'t>(&self, bx: &Binder<'t>, x: Var<'t>) -> Var<'t> {
        self.fc2.forward(bx, self.fc1.forward(bx, x).gelu())
    }
}

impl Parameterized for PointwiseHead {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Layer norm over the channel-concatenated modalities, then score, offset and size heads.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub ln: LayerNormParams,
    pub score: PointwiseHead,
    pub offset: PointwiseHead,
    pub size: PointwiseHead,
}

impl HeadParams {
    pub fn init<R: Rng>(cfg: &Config, rng: &mut R) -> Self {
        let (d, h) = (2 * cfg.embed_dim, cfg.head_hidden);
        Self {
            ln: LayerNormParams::new(d),
            score: PointwiseHead::init(d, h, 1, rng),
            offset: PointwiseHead::init(d, h, 2, rng),
            size: PointwiseHead::init(d, h, 2, rng),
        }
    }
}

impl Parameterized for HeadParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        self.ln.visit(&join(prefix, "ln"), f);
        self.score.visit(&join(prefix, "score"), f);
        self.offset.visit(&join(prefix, "offset"), f);
        self.size.visit(&join(prefix, "size"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.ln.visit_mut(&join(prefix, "ln"), f);
        self.score.visit_mut(&join(prefix, "score"), f);
        self.offset.visit_mut(&join(prefix, "offset"), f);
        self.size.visit_mut(&join(prefix, "size"), f);
    }
}

/// Per-cell head outputs: score logits `[N, 1]`, centre offsets in cells
/// `[N, 2]`, and sizes as a fraction of the search crop `[N, 2]`.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput<'t> {
    pub logits: Var<'t>,
    pub offsets: Var<'t>,
    pub sizes: Var<'t>,
    pub grid: Grid,
}

pub fn head_forward<'t>(
    bx: &Binder<'t>,
    x_v: &VarSeq<'t>,
    x_t: &VarSeq<'t>,
    params: &HeadParams,
    cfg: &Config,
) -> Result<HeadOutput<'t>> {
    let grid = cfg.search_grid();
    let n = grid.0 * grid.1;
    for x in [x_v, x_t] {
        if x.grid != grid || x.tokens.rows() != n {
            return Err(Error::contract(format!(
                "head needs restored {}x{} search tokens, got {} on grid {:?}",
                grid.0,
                grid.1,
                x.tokens.rows(),
                x.grid
            )));
        }
    }
    let fused = params.ln.forward(bx, bx.tape().concat_cols(&[x_v.tokens, x_t.tokens]));
    Ok(HeadOutput {
        logits: params.score.forward(bx, fused),
        offsets: params.offset.forward(bx, fused),
        sizes: params.size.forward(bx, fused).sigmoid(),
        grid,
    })
}

/// Box in search-crop pixels and confidence from raw head outputs.
///
/// The best cell is the first maximum in row-major order; the confidence is
/// its sigmoid score.
pub fn decode_box(
    logits: &[f64],
    offsets: &[f64],
    sizes: &[f64],
    grid: Grid,
    patch: usize,
    search_size: usize,
) -> (BBox, f64) {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    let (row, col) = (best / grid.1, best % grid.1);
    let p = patch as f64;
    let cx = (col as f64 + 0.5 + offsets[2 * best]) * p;
    let cy = (row as f64 + 0.5 + offsets[2 * best + 1]) * p;
    let s = search_size as f64;
    let (w, h) = (sizes[2 * best] * s, sizes[2 * best + 1] * s);
    (BBox::from_center(cx, cy, w, h), sigmoid(logits[best]))
}

pub fn predict_head<'t>(
    bx: &Binder<'t>,
    x_v: &VarSeq<'t>,
    x_t: &VarSeq<'t>,
    params: &HeadParams,
    cfg: &Config,
) -> Result<(BBox, f64)> {
    let out = head_forward(bx, x_v, x_t, params, cfg)?;
    Ok(decode_output(&out, cfg))
}

pub fn decode_output(out: &HeadOutput<'_>, cfg: &Config) -> (BBox, f64) {
    decode_box(
        out.logits.value().data(),
        out.offsets.value().data(),
        out.sizes.value().data(),
        out.grid,
        cfg.patch_size,
        cfg.search_size,
    )
}
