//! Shared-weight transformer encoder over both modality streams, with
//! optional search-token elimination and per-layer hooks.

use rand::Rng;

use crate::config::{Config, Grid};
use crate::embedding::{join_tokens, split_tokens, Role, TokenSeq, VarSeq};
use crate::error::{Error, Result};
use crate::tensor::ops::{join, Parameterized};
use crate::tensor::{Binder, LayerNormParams, LinearParams, MlpParams, Tensor, Var};

/// Query/key/value and output projections of one multi-head attention.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnParams {
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
    pub proj: LinearParams,
}

impl AttnParams {
    pub fn init<R: Rng>(dim: usize, rng: &mut R) -> Self {
        Self {
            q: LinearParams::init(dim, dim, rng),
            k: LinearParams::init(dim, dim, rng),
            v: LinearParams::init(dim, dim, rng),
            proj: LinearParams::init(dim, dim, rng),
        }
    }

    /// Returns the projected output and the raw attention node, whose
    /// probabilities can be read back through [`crate::tensor::Tape::attention_probs`].
    pub fn forward<'t>(
        &self,
        bx: &Binder<'t>,
        query: Var<'t>,
        context: Var<'t>,
        heads: usize,
    ) -> (Var<'t>, Var<'t>) {
        let q = self.q.forward(bx, query);
        let k = self.k.forward(bx, context);
        let v = self.v.forward(bx, context);
        let a = q.attention(k, v, heads);
        (self.proj.forward(bx, a), a)
    }
}

impl Parameterized for AttnParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        self.q.visit(&join(prefix, "q"), f);
        self.k.visit(&join(prefix, "k"), f);
        self.v.visit(&join(prefix, "v"), f);
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.q.visit_mut(&join(prefix, "q"), f);
        self.k.visit_mut(&join(prefix, "k"), f);
        self.v.visit_mut(&join(prefix, "v"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

/// Pre-norm block: `h + Attn(LN(h))`, then `+ MLP(LN(.))`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayerParams {
    pub ln1: LayerNormParams,
    pub attn: AttnParams,
    pub ln2: LayerNormParams,
    pub mlp: MlpParams,
}

impl EncoderLayerParams {
    pub fn init<R: Rng>(cfg: &Config, rng: &mut R) -> Result<Self> {
        let d = cfg.embed_dim;
        Ok(Self {
            ln1: LayerNormParams::new(d),
            attn: AttnParams::init(d, rng),
            ln2: LayerNormParams::new(d),
            mlp: MlpParams::init(d, cfg.mlp_ratio, rng)?,
        })
    }

    pub fn forward<'t>(&self, bx: &Binder<'t>, h: Var<'t>, heads: usize) -> (Var<'t>, Var<'t>) {
        let n = self.ln1.forward(bx, h);
        let (a, probs) = self.attn.forward(bx, n, n, heads);
        let h = h.add(a);
        let m = self.mlp.forward(bx, self.ln2.forward(bx, h));
        (h.add(m), probs)
    }
}

impl Parameterized for EncoderLayerParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<EncoderLayerParams>,
}

impl EncoderParams {
    pub fn init<R: Rng>(cfg: &Config, rng: &mut R) -> Result<Self> {
        let layers = (0..cfg.depth)
            .map(|_| EncoderLayerParams::init(cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }
}

impl Parameterized for EncoderParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layer{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layer{i}")), f);
        }
    }
}

/// Search tokens surviving elimination, as indices into the un-eliminated sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EliminationRecord {
    /// Zero-based encoder layer after which the elimination happened.
    pub layer_index: usize,
    pub kept_indices: Vec<usize>,
    pub original_len: usize,
    pub original_grid: Grid,
}

impl EliminationRecord {
    pub fn identity(layer_index: usize, grid: Grid) -> Self {
        let n = grid.0 * grid.1;
        Self {
            layer_index,
            kept_indices: (0..n).collect(),
            original_len: n,
            original_grid: grid,
        }
    }
}

/// Mean attention each search token receives from the template queries,
/// averaged over heads. `probs` is `[heads, n, n]` over a joint sequence.
pub fn elimination_scores(probs: &[f64], heads: usize, n: usize, n_z: usize) -> Vec<f64> {
    assert_eq!(probs.len(), heads * n * n, "elimination_scores: probs shape");
    let mut scores = vec![0.0; n - n_z];
    for h in 0..heads {
        for i in 0..n_z {
            let row = &probs[(h * n + i) * n..(h * n + i + 1) * n];
            for (s, p) in scores.iter_mut().zip(&row[n_z..]) {
                *s += p;
            }
        }
    }
    let denom = (heads * n_z.max(1)) as f64;
    scores.iter_mut().for_each(|s| *s /= denom);
    scores
}

/// Positions of the `ceil(keep_rate * n)` highest scores, ascending.
/// Equal scores keep the lower position.
pub fn select_kept(scores: &[f64], keep_rate: f64) -> Result<Vec<usize>> {
    if !(keep_rate > 0.0 && keep_rate <= 1.0) {
        return Err(Error::config(format!("keep_rate {keep_rate} outside (0, 1]")));
    }
    let keep = ((keep_rate * scores.len() as f64).ceil() as usize).min(scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Drops low-scoring search tokens from a joint sequence; template tokens always stay.
///
/// `prior` maps the current search positions to the original ordering when
/// an earlier layer already eliminated tokens.
pub fn eliminate<'t>(
    h: &VarSeq<'t>,
    n_z: usize,
    keep_rate: f64,
    scores: &[f64],
    layer_index: usize,
    prior: &EliminationRecord,
) -> Result<(VarSeq<'t>, EliminationRecord)> {
    let n_x = h.len() - n_z;
    if scores.len() != n_x || prior.kept_indices.len() != n_x {
        return Err(Error::contract(format!(
            "{} scores / {} prior indices for {n_x} search tokens",
            scores.len(),
            prior.kept_indices.len()
        )));
    }
    let local = select_kept(scores, keep_rate)?;
    let rows: Vec<usize> = (0..n_z).chain(local.iter().map(|&i| n_z + i)).collect();
    let tokens = if local.len() == n_x { h.tokens } else { h.tokens.gather_rows(&rows) };
    let record = EliminationRecord {
        layer_index,
        kept_indices: local.iter().map(|&i| prior.kept_indices[i]).collect(),
        original_len: prior.original_len,
        original_grid: prior.original_grid,
    };
    let out = TokenSeq {
        tokens,
        role: Role::Joint,
        modality: h.modality,
        grid: (1, rows.len()),
    };
    Ok((out, record))
}

/// Where the template and search parts of a joint sequence sit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub z_grid: Grid,
    pub x_grid: Grid,
}

impl Layout {
    pub fn n_z(&self) -> usize {
        self.z_grid.0 * self.z_grid.1
    }

    pub fn n_x(&self) -> usize {
        self.x_grid.0 * self.x_grid.1
    }
}

/// Tokens captured after one preserve layer, before that layer's hook runs.
#[derive(Clone, Debug)]
pub struct Preserved<'t> {
    /// Zero-based layer index.
    pub layer_index: usize,
    pub z_v: VarSeq<'t>,
    pub z_t: VarSeq<'t>,
    pub x_v: VarSeq<'t>,
    pub x_t: VarSeq<'t>,
    pub record: EliminationRecord,
}

#[derive(Clone, Debug)]
pub struct BackboneOutput<'t> {
    pub h_v: VarSeq<'t>,
    pub h_t: VarSeq<'t>,
    pub layout: Layout,
    /// Cumulative elimination state after the last layer.
    pub record: EliminationRecord,
    pub eliminations: Vec<EliminationRecord>,
    pub preserved: Vec<Preserved<'t>>,
}

impl<'t> BackboneOutput<'t> {
    pub fn split(&self) -> Result<((VarSeq<'t>, VarSeq<'t>), (VarSeq<'t>, VarSeq<'t>))> {
        let l = self.layout;
        Ok((split_tokens(&self.h_v, l.z_grid, l.x_grid)?, split_tokens(&self.h_t, l.z_grid, l.x_grid)?))
    }
}

/// Callback run after selected layers on both joint streams.
pub type LayerHook<'h, 't> =
    dyn FnMut(usize, VarSeq<'t>, VarSeq<'t>, &Layout) -> Result<(VarSeq<'t>, VarSeq<'t>)> + 'h;

/// Which zero-based layers eliminate, preserve and call the hook.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BackboneSchedule {
    pub hook_layers: Vec<usize>,
    pub preserve_layers: Vec<usize>,
    pub eliminate_layers: Vec<usize>,
    pub keep_rate: f64,
    /// Zero-based layer after which the pass stops; `None` runs every layer.
    pub stop_after: Option<usize>,
}

impl BackboneSchedule {
    pub fn from_config(cfg: &Config) -> Self {
        let layers: Vec<usize> = cfg.insert_layers.iter().map(|&l| Config::layer_index(l)).collect();
        Self {
            hook_layers: layers.clone(),
            preserve_layers: layers.clone(),
            eliminate_layers: if cfg.elimination { layers } else { Vec::new() },
            keep_rate: cfg.keep_rate,
            stop_after: None,
        }
    }
}

/// Runs every encoder layer on both modality streams with the same parameters.
#[allow(clippy::too_many_arguments)]
pub fn run_backbone<'t>(
    bx: &Binder<'t>,
    params: &EncoderParams,
    heads: usize,
    z_v: &VarSeq<'t>,
    x_v: &VarSeq<'t>,
    z_t: &VarSeq<'t>,
    x_t: &VarSeq<'t>,
    schedule: &BackboneSchedule,
    hook: &mut LayerHook<'_, 't>,
) -> Result<BackboneOutput<'t>> {
    let depth = params.layers.len();
    for &l in schedule
        .hook_layers
        .iter()
        .chain(&schedule.preserve_layers)
        .chain(&schedule.eliminate_layers)
    {
        if l >= depth {
            return Err(Error::config(format!("layer index {l} with only {depth} encoder layers")));
        }
    }
    if z_v.grid != z_t.grid || x_v.grid != x_t.grid {
        return Err(Error::contract("modality streams have different layouts"));
    }
    let mut layout = Layout {
        z_grid: z_v.grid,
        x_grid: x_v.grid,
    };
    let mut h_v = join_tokens(z_v, x_v)?;
    let mut h_t = join_tokens(z_t, x_t)?;
    let mut record = EliminationRecord::identity(usize::MAX, x_v.grid);
    let mut eliminations = Vec::new();
    let mut preserved = Vec::new();

    for (i, layer) in params.layers.iter().enumerate() {
        let (ov, av) = layer.forward(bx, h_v.tokens, heads);
        let (ot, at) = layer.forward(bx, h_t.tokens, heads);
        h_v = h_v.with_tokens(ov);
        h_t = h_t.with_tokens(ot);

        if schedule.eliminate_layers.contains(&i) && layout.n_x() > 0 {
            let n = h_v.len();
            let tape = bx.tape();
            let pv = tape.attention_probs(av).expect("attention node");
            let pt = tape.attention_probs(at).expect("attention node");
            let sv = elimination_scores(&pv, heads, n, layout.n_z());
            let st = elimination_scores(&pt, heads, n, layout.n_z());
            let scores: Vec<f64> = sv.iter().zip(&st).map(|(a, b)| 0.5 * (a + b)).collect();
            let (ev, rec) = eliminate(&h_v, layout.n_z(), schedule.keep_rate, &scores, i, &record)?;
            let (et, _) = eliminate(&h_t, layout.n_z(), schedule.keep_rate, &scores, i, &record)?;
            h_v = ev;
            h_t = et;
            layout.x_grid = (1, rec.kept_indices.len());
            record = rec.clone();
            eliminations.push(rec);
        }

        if schedule.preserve_layers.contains(&i) {
            let (zv, xv) = split_tokens(&h_v, layout.z_grid, layout.x_grid)?;
            let (zt, xt) = split_tokens(&h_t, layout.z_grid, layout.x_grid)?;
            preserved.push(Preserved {
                layer_index: i,
                z_v: zv,
                z_t: zt,
                x_v: xv,
                x_t: xt,
                record: EliminationRecord {
                    layer_index: i,
                    ..record.clone()
                },
            });
        }

        if schedule.hook_layers.contains(&i) {
            let (a, b) = hook(i, h_v, h_t, &layout)?;
            if a.len() != h_v.len() || b.len() != h_t.len() {
                return Err(Error::contract(format!("hook at layer {i} changed the sequence length")));
            }
            h_v = a;
            h_t = b;
        }
        if schedule.stop_after == Some(i) {
            break;
        }
    }
    Ok(BackboneOutput {
        h_v,
        h_t,
        layout,
        record,
        eliminations,
        preserved,
    })
}
