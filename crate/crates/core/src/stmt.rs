//! Cross-modal enhancement of template and dynamic tokens, and fusion of
//! search tokens with dynamic tokens, inserted between encoder layers.

use rand::Rng;

use crate::config::Config;
use crate::embedding::{join_tokens, split_tokens, Role, TokenSeq, VarSeq};
use crate::encoder::{AttnParams, Layout};
use crate::error::{Error, Result};
use crate::tensor::ops::{join, Parameterized};
use crate::tensor::{Binder, LayerNormParams, MlpParams, Tensor};

/// `q' = q + Attn(q, kv)`, `out = q' + MLP(LN(q'))`.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttnParams {
    pub attn: AttnParams,
    pub ln: LayerNormParams,
    pub mlp: MlpParams,
}

impl CrossAttnParams {
    pub fn init<R: Rng>(cfg: &Config, rng: &mut R) -> Result<Self> {
        let d = cfg.embed_dim;
        Ok(Self {
            attn: AttnParams::init(d, rng),
            ln: LayerNormParams::new(d),
            mlp: MlpParams::init(d, cfg.mlp_ratio, rng)?,
        })
    }

    /// Zeroes the output and second MLP projections. The block starts as an
    /// identity but, unlike [`Self::zero_residuals`], still passes gradient to
    /// the output projections.
    pub fn zero_outputs(&mut self) {
        self.attn.proj.zero_();
        self.mlp.fc2.zero_();
    }

    /// Zeroes the value, output and second MLP projections, which makes the
    /// block an exact identity on its query.
    pub fn zero_residuals(&mut self) {
        self.attn.v.zero_();
        self.attn.proj.zero_();
        self.mlp.fc2.zero_();
    }
}

impl Parameterized for CrossAttnParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        self.attn.visit(&join(prefix, "attn"), f);
        self.ln.visit(&join(prefix, "ln"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.ln.visit_mut(&join(prefix, "ln"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
    }
}

/// Parameters of one insertion layer. `ca_dynamic` and `tf` exist only at
/// temporal-fusion layers; `ca_dynamic` is also absent when tied to `ca_template`.
#[derive(Clone, Debug, PartialEq)]
pub struct StmtLayerParams {
    pub ca_template: CrossAttnParams,
    pub ca_dynamic: Option<CrossAttnParams>,
    pub tf: Option<CrossAttnParams>,
}

impl StmtLayerParams {
    pub fn init<R: Rng>(cfg: &Config, fuses: bool, rng: &mut R) -> Result<Self> {
        let ca_template = CrossAttnParams::init(cfg, rng)?;
        let ca_dynamic = if fuses && !cfg.tie_ca_params {
            Some(CrossAttnParams::init(cfg, rng)?)
        } else {
            None
        };
        let tf = if fuses { Some(CrossAttnParams::init(cfg, rng)?) } else { None };
        Ok(Self {
            ca_template,
            ca_dynamic,
            tf,
        })
    }

    pub fn zero_residuals(&mut self) {
        self.ca_template.zero_residuals();
        self.ca_dynamic.iter_mut().for_each(CrossAttnParams::zero_residuals);
        self.tf.iter_mut().for_each(CrossAttnParams::zero_residuals);
    }

    fn dynamic_ca(&self) -> &CrossAttnParams {
        self.ca_dynamic.as_ref().unwrap_or(&self.ca_template)
    }
}

impl Parameterized for StmtLayerParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        self.ca_template.visit(&join(prefix, "ca_template"), f);
        if let Some(p) = &self.ca_dynamic {
            p.visit(&join(prefix, "ca_dynamic"), f);
        }
        if let Some(p) = &self.tf {
            p.visit(&join(prefix, "tf"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.ca_template.visit_mut(&join(prefix, "ca_template"), f);
        if let Some(p) = &mut self.ca_dynamic {
            p.visit_mut(&join(prefix, "ca_dynamic"), f);
        }
        if let Some(p) = &mut self.tf {
            p.visit_mut(&join(prefix, "tf"), f);
        }
    }
}

/// One parameter set per insertion layer, keyed by the 1-based layer number.
#[derive(Clone, Debug, PartialEq)]
pub struct StmtParams {
    pub layers: Vec<(usize, StmtLayerParams)>,
}

impl StmtParams {
    pub fn init<R: Rng>(cfg: &Config, rng: &mut R) -> Result<Self> {
        let layers = cfg
            .insert_layers
            .iter()
            .map(|&l| {
                let mut p = StmtLayerParams::init(cfg, cfg.tf_layers.contains(&l), rng)?;
                if cfg.stmt_zero_init {
                    p.ca_template.zero_outputs();
                    p.ca_dynamic.iter_mut().for_each(CrossAttnParams::zero_outputs);
                    p.tf.iter_mut().for_each(CrossAttnParams::zero_outputs);
                }
                Ok((l, p))
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn get(&self, layer: usize) -> Option<&StmtLayerParams> {
        self.layers.iter().find(|(l, _)| *l == layer).map(|(_, p)| p)
    }
}

impl Parameterized for StmtParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        for (l, p) in &self.layers {
            p.visit(&join(prefix, &format!("layer{l}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (l, p) in &mut self.layers {
            p.visit_mut(&join(prefix, &format!("layer{l}")), f);
        }
    }
}

/// Tokens of `q_seq` enhanced by attending to `kv_seq`.
pub fn ca<'t>(
    bx: &Binder<'t>,
    q_seq: &VarSeq<'t>,
    kv_seq: &VarSeq<'t>,
    params: &CrossAttnParams,
    heads: usize,
) -> Result<VarSeq<'t>> {
    let d = params.attn.q.in_dim();
    if q_seq.tokens.cols() != d || kv_seq.tokens.cols() != d {
        return Err(Error::contract(format!(
            "cross attention over widths {} and {}, parameters expect {d}",
            q_seq.tokens.cols(),
            kv_seq.tokens.cols()
        )));
    }
    let q = q_seq.tokens;
    let (g, _) = params.attn.forward(bx, q, kv_seq.tokens, heads);
    let q1 = q.add(g);
    let out = q1.add(params.mlp.forward(bx, params.ln.forward(bx, q1)));
    Ok(q_seq.with_tokens(out))
}

/// Search tokens fused with the same modality's dynamic tokens.
pub fn tf<'t>(
    bx: &Binder<'t>,
    x_seq: &VarSeq<'t>,
    m_seq: &VarSeq<'t>,
    params: &CrossAttnParams,
    heads: usize,
) -> Result<VarSeq<'t>> {
    if x_seq.modality != m_seq.modality {
        return Err(Error::contract(format!(
            "temporal fusion of {} search with {} dynamic tokens",
            x_seq.modality.as_str(),
            m_seq.modality.as_str()
        )));
    }
    if x_seq.role != Role::Search || m_seq.role != Role::Dynamic {
        return Err(Error::contract(format!(
            "temporal fusion expects search+dynamic, got {:?}+{:?}",
            x_seq.role, m_seq.role
        )));
    }
    ca(bx, x_seq, m_seq, params, heads)
}

/// Dynamic tokens `(M_v, M_t)` consumed by one insertion layer.
pub type DynamicPair<'t> = (VarSeq<'t>, VarSeq<'t>);

/// How dynamic tokens take part in a forward pass.
#[derive(Clone, Copy)]
pub enum Dynamic<'a, 't> {
    /// No cache exists yet (initialisation pass, temporal branch of training).
    Inactive,
    /// Per-layer lookup of cached or simulated tokens.
    Active(&'a dyn Fn(usize) -> Option<DynamicPair<'t>>),
}

/// One insertion layer applied to both joint streams.
#[allow(clippy::too_many_arguments)]
pub fn stmt_forward<'t>(
    bx: &Binder<'t>,
    cfg: &Config,
    layer: usize,
    params: &StmtLayerParams,
    h_v: &VarSeq<'t>,
    h_t: &VarSeq<'t>,
    layout: &Layout,
    dynamic: Dynamic<'_, 't>,
) -> Result<(VarSeq<'t>, VarSeq<'t>)> {
    let fuse_layer = cfg.enable_dynamic_tokens && cfg.tf_layers.contains(&layer);
    let fusing = fuse_layer && matches!(dynamic, Dynamic::Active(_));
    if !cfg.enable_modality_enhancement && !fusing {
        return Ok((*h_v, *h_t));
    }
    let heads = cfg.heads;
    let (z_v, x_v) = split_tokens(h_v, layout.z_grid, layout.x_grid)?;
    let (z_t, x_t) = split_tokens(h_t, layout.z_grid, layout.x_grid)?;

    let (z_v, z_t) = if cfg.enable_modality_enhancement {
        (
            ca(bx, &z_v, &z_t, &params.ca_template, heads)?,
            ca(bx, &z_t, &z_v, &params.ca_template, heads)?,
        )
    } else {
        (z_v, z_t)
    };

    let (x_v, x_t) = match dynamic {
        Dynamic::Active(lookup) if fusing => {
            let (m_v, m_t) = lookup(layer).ok_or_else(|| {
                Error::contract(format!("no dynamic tokens for insertion layer {layer}; seed the cache first"))
            })?;
            let tf_params = params
                .tf
                .as_ref()
                .ok_or_else(|| Error::contract(format!("layer {layer} has no temporal fusion parameters")))?;
            let (m_v, m_t) = if cfg.enable_modality_enhancement {
                let ca_m = params.dynamic_ca();
                (ca(bx, &m_v, &m_t, ca_m, heads)?, ca(bx, &m_t, &m_v, ca_m, heads)?)
            } else {
                (m_v, m_t)
            };
            (tf(bx, &x_v, &m_v, tf_params, heads)?, tf(bx, &x_t, &m_t, tf_params, heads)?)
        }
        _ => (x_v, x_t),
    };
    Ok((join_tokens(&z_v, &x_v)?, join_tokens(&z_t, &x_t)?))
}

/// Builds a dynamic-role sequence from template-shaped tokens.
pub fn as_dynamic<T: Copy>(seq: &TokenSeq<T>) -> TokenSeq<T> {
    TokenSeq {
        role: Role::Dynamic,
        ..*seq
    }
}
