//! The full network: embedding, shared encoder with STMT hooks, and head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::embedding::{embed, EmbedParams, Role, VarSeq};
use crate::encoder::{run_backbone, BackboneOutput, BackboneSchedule, EncoderParams};
use crate::error::{Error, Result};
use crate::head::{head_forward, HeadOutput, HeadParams};
use crate::image::ModalImage;
use crate::memory::{restore_var, PreservedTokens};
use crate::stmt::{stmt_forward, Dynamic, StmtParams};
use crate::tensor::ops::{join, Parameterized};
use crate::tensor::{Binder, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct StmtModel {
    pub embed: EmbedParams,
    pub encoder: EncoderParams,
    pub stmt: StmtParams,
    pub head: HeadParams,
}

impl StmtModel {
    /// Fresh parameters drawn from `cfg.seed`.
    pub fn new(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            embed: EmbedParams::init(cfg, &mut rng),
            encoder: EncoderParams::init(cfg, &mut rng)?,
            stmt: StmtParams::init(cfg, &mut rng)?,
            head: HeadParams::init(cfg, &mut rng),
        })
    }

    /// Normalizes and embeds one RGB/TIR crop pair.
    pub fn embed_pair<'t>(
        &self,
        bx: &Binder<'t>,
        cfg: &Config,
        rgb: &ModalImage,
        tir: &ModalImage,
        role: Role,
    ) -> Result<(VarSeq<'t>, VarSeq<'t>)> {
        let norm = |m: &ModalImage| m.normalized(cfg.pixel_mean, cfg.pixel_std);
        Ok((
            embed(bx, &norm(rgb), role, &self.embed, cfg)?,
            embed(bx, &norm(tir), role, &self.embed, cfg)?,
        ))
    }

    /// Encoder layers with STMT hooks at the insertion layers. `stop_after`
    /// is a zero-based layer index at which the pass ends early.
    #[allow(clippy::too_many_arguments)]
    pub fn backbone<'t>(
        &self,
        bx: &Binder<'t>,
        cfg: &Config,
        z_v: &VarSeq<'t>,
        z_t: &VarSeq<'t>,
        x_v: &VarSeq<'t>,
        x_t: &VarSeq<'t>,
        dynamic: Dynamic<'_, 't>,
        stop_after: Option<usize>,
    ) -> Result<BackboneOutput<'t>> {
        let schedule = BackboneSchedule {
            stop_after,
            ..BackboneSchedule::from_config(cfg)
        };
        let mut hook = |i: usize, h_v: VarSeq<'t>, h_t: VarSeq<'t>, layout: &crate::encoder::Layout| {
            let layer = i + 1;
            let params = self
                .stmt
                .get(layer)
                .ok_or_else(|| Error::config(format!("no STMT parameters for layer {layer}")))?;
            stmt_forward(bx, cfg, layer, params, &h_v, &h_t, layout, dynamic)
        };
        run_backbone(bx, &self.encoder, cfg.heads, z_v, x_v, z_t, x_t, &schedule, &mut hook)
    }

    /// Backbone with STMT hooks, restoration of eliminated search tokens, and head.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'t>(
        &self,
        bx: &Binder<'t>,
        cfg: &Config,
        z_v: &VarSeq<'t>,
        z_t: &VarSeq<'t>,
        x_v: &VarSeq<'t>,
        x_t: &VarSeq<'t>,
        dynamic: Dynamic<'_, 't>,
    ) -> Result<ModelOutput<'t>> {
        let backbone = self.backbone(bx, cfg, z_v, z_t, x_v, x_t, dynamic, None)?;
        let ((_, sx_v), (_, sx_t)) = backbone.split()?;
        let x_v = restore_var(&sx_v, &backbone.record)?;
        let x_t = restore_var(&sx_t, &backbone.record)?;
        let head = head_forward(bx, &x_v, &x_t, &self.head, cfg)?;
        Ok(ModelOutput {
            head,
            x_v,
            x_t,
            backbone,
        })
    }
}

impl Parameterized for StmtModel {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        self.embed.visit(&join(prefix, "embed"), f);
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.stmt.visit(&join(prefix, "stmt"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.embed.visit_mut(&join(prefix, "embed"), f);
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.stmt.visit_mut(&join(prefix, "stmt"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

#[derive(Clone, Debug)]
pub struct ModelOutput<'t> {
    pub head: HeadOutput<'t>,
    /// Final search tokens restored to full length.
    pub x_v: VarSeq<'t>,
    pub x_t: VarSeq<'t>,
    pub backbone: BackboneOutput<'t>,
}

impl ModelOutput<'_> {
    pub fn preserved_tokens(&self) -> Vec<PreservedTokens> {
        self.backbone.preserved.iter().map(PreservedTokens::from_var).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::TokenSeq;
    use crate::image::Modality;
    use crate::stmt::{as_dynamic, DynamicPair};
    use crate::tensor::{grad_check, GradCheckOptions, Tape};

    fn images(cfg: &Config, seed: u64) -> [ModalImage; 4] {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mk = |s: usize, m: Modality, r: &mut ChaCha8Rng| {
            let t = Tensor::uniform(&[s, s, m.channels()], 0.5, r);
            let t = Tensor::new(t.shape(), t.data().iter().map(|v| v + 0.5).collect()).unwrap();
            ModalImage::new(t, m).unwrap()
        };
        [
            mk(cfg.template_size, Modality::Rgb, &mut r),
            mk(cfg.template_size, Modality::Tir, &mut r),
            mk(cfg.search_size, Modality::Rgb, &mut r),
            mk(cfg.search_size, Modality::Tir, &mut r),
        ]
    }

    #[test]
    fn forward_shapes_with_and_without_dynamic_tokens() {
        let mut cfg = Config::tiny();
        cfg.elimination = true;
        cfg.stmt_zero_init = false;
        let model = StmtModel::new(&cfg).unwrap();
        let [zv, zt, xv, xt] = images(&cfg, 1);
        let tape = Tape::new();
        let bx = Binder::new(&tape, false);
        let (z_v, z_t) = model.embed_pair(&bx, &cfg, &zv, &zt, Role::Template).unwrap();
        let (x_v, x_t) = model.embed_pair(&bx, &cfg, &xv, &xt, Role::Search).unwrap();
        let init = model.forward(&bx, &cfg, &z_v, &z_t, &x_v, &x_t, Dynamic::Inactive).unwrap();
        assert_eq!(init.x_v.len(), cfg.n_search());
        assert_eq!(init.preserved_tokens().len(), cfg.insert_layers.len());

        let m: Vec<(usize, DynamicPair<'_>)> = init
            .backbone
            .preserved
            .iter()
            .map(|p| (p.layer_index + 1, (as_dynamic(&p.z_v), as_dynamic(&p.z_t))))
            .collect();
        let lookup = |l: usize| m.iter().find(|(k, _)| *k == l).map(|(_, p)| *p);
        let out = model.forward(&bx, &cfg, &z_v, &z_t, &x_v, &x_t, Dynamic::Active(&lookup)).unwrap();
        assert_ne!(*out.head.logits.value(), *init.head.logits.value());
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let cfg = Config::tiny();
        let mut model = StmtModel::new(&cfg).unwrap();
        let [zv, zt, xv, xt] = images(&cfg, 2);
        let mk_dyn = |r: &mut ChaCha8Rng| Tensor::uniform(&[cfg.n_template(), cfg.embed_dim], 1.0, r);
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let dyn_tokens = [mk_dyn(&mut r), mk_dyn(&mut r)];
        let opts = GradCheckOptions {
            exhaustive_limit: 0,
            sample: 200,
            ..Default::default()
        };
        let rep = grad_check(
            &mut model,
            |m, bx| {
                let (z_v, z_t) = m.embed_pair(bx, &cfg, &zv, &zt, Role::Template)?;
                let (x_v, x_t) = m.embed_pair(bx, &cfg, &xv, &xt, Role::Search)?;
                let seq = |t: &Tensor, md| TokenSeq {
                    tokens: bx.constant(t.clone()),
                    role: Role::Dynamic,
                    modality: md,
                    grid: cfg.template_grid(),
                };
                let pair = (seq(&dyn_tokens[0], Modality::Rgb), seq(&dyn_tokens[1], Modality::Tir));
                let lookup = move |_l: usize| Some(pair);
                let out = m.forward(bx, &cfg, &z_v, &z_t, &x_v, &x_t, Dynamic::Active(&lookup))?;
                let h = out.head;
                Ok(h.logits.sigmoid().sum().add(h.offsets.gelu().sum()).add(h.sizes.sum()))
            },
            &opts,
        )
        .unwrap();
        assert!(rep.max_rel_err <= 1e-4, "{rep:?}");
    }
}
