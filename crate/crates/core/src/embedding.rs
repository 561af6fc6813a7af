//! Patch embedding of template and search crops, and the joint token layout.

use rand::Rng;

use crate::config::{Config, Grid};
use crate::error::{Error, Result};
use crate::image::{ModalImage, Modality};
use crate::tensor::ops::{join, Parameterized};
use crate::tensor::{Binder, LinearParams, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Template,
    Search,
    Dynamic,
    /// Template tokens followed by search tokens.
    Joint,
}

/// Ordered tokens `[N, D]` tagged with role, modality and spatial grid.
///
/// `T` is a [`Tensor`] for stored sequences and a [`Var`] inside a forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenSeq<T = Tensor> {
    pub tokens: T,
    pub role: Role,
    pub modality: Modality,
    pub grid: Grid,
}

pub type VarSeq<'t> = TokenSeq<Var<'t>>;

impl<T> TokenSeq<T> {
    pub fn len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_tokens<U>(&self, tokens: U) -> TokenSeq<U> {
        TokenSeq {
            tokens,
            role: self.role,
            modality: self.modality,
            grid: self.grid,
        }
    }
}

impl TokenSeq {
    pub fn new(tokens: Tensor, role: Role, modality: Modality, grid: Grid) -> Result<Self> {
        if tokens.rank() != 2 || tokens.rows() != grid.0 * grid.1 {
            return Err(Error::dim(
                "TokenSeq",
                format!("tokens {:?} do not fill grid {grid:?}", tokens.shape()),
            ));
        }
        Ok(Self {
            tokens,
            role,
            modality,
            grid,
        })
    }

    pub fn lift<'t>(&self, bx: &Binder<'t>) -> VarSeq<'t> {
        self.with_tokens(bx.constant(self.tokens.clone()))
    }
}

impl<'t> VarSeq<'t> {
    pub fn to_tensor_seq(&self) -> TokenSeq {
        self.with_tokens(self.tokens.to_tensor())
    }

    pub fn detach(&self) -> Self {
        self.with_tokens(self.tokens.detach())
    }
}

/// Patch projection plus one position table per role, shared by both modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedParams {
    pub patch_proj: LinearParams,
    pub pos_template: Tensor,
    pub pos_search: Tensor,
}

impl EmbedParams {
    pub fn init<R: Rng>(cfg: &Config, rng: &mut R) -> Self {
        let p = cfg.patch_size;
        Self {
            patch_proj: LinearParams::init(3 * p * p, cfg.embed_dim, rng),
            pos_template: Tensor::normal(&[cfg.n_template(), cfg.embed_dim], 0.02, rng),
            pos_search: Tensor::normal(&[cfg.n_search(), cfg.embed_dim], 0.02, rng),
        }
    }
}

impl Parameterized for EmbedParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        self.patch_proj.visit(&join(prefix, "patch_proj"), f);
        f(&join(prefix, "pos_template"), &self.pos_template);
        f(&join(prefix, "pos_search"), &self.pos_search);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.patch_proj.visit_mut(&join(prefix, "patch_proj"), f);
        f(&join(prefix, "pos_template"), &mut self.pos_template);
        f(&join(prefix, "pos_search"), &mut self.pos_search);
    }
}

/// Splits an image into row-major `p x p` patches, each flattened as
/// `(row, col, channel)`. Single-channel images are replicated to three channels.
pub fn patchify(img: &ModalImage, p: usize) -> Result<Tensor> {
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::config(format!("{h}x{w} image is not divisible into {p}px patches")));
    }
    let (gr, gc) = (h / p, w / p);
    let src = img.pixels.data();
    let mut out = Vec::with_capacity(gr * gc * 3 * p * p);
    for r in 0..gr {
        for c in 0..gc {
            for py in 0..p {
                for px in 0..p {
                    let base = ((r * p + py) * w + c * p + px) * ch;
                    if ch == 3 {
                        out.extend_from_slice(&src[base..base + 3]);
                    } else {
                        out.extend_from_slice(&[src[base]; 3]);
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![gr * gc, 3 * p * p], out))
}

/// `patchify(img) E + pos[role]`.
pub fn embed<'t>(
    bx: &Binder<'t>,
    img: &ModalImage,
    role: Role,
    params: &EmbedParams,
    cfg: &Config,
) -> Result<VarSeq<'t>> {
    let (size, grid, pos) = match role {
        Role::Template => (cfg.template_size, cfg.template_grid(), &params.pos_template),
        Role::Search => (cfg.search_size, cfg.search_grid(), &params.pos_search),
        _ => return Err(Error::config(format!("cannot embed an image as {role:?} tokens"))),
    };
    if img.height() != size || img.width() != size {
        return Err(Error::config(format!(
            "{role:?} image is {}x{}, expected {size}x{size}",
            img.height(),
            img.width()
        )));
    }
    let patches = bx.constant(patchify(img, cfg.patch_size)?);
    let tokens = params.patch_proj.forward(bx, patches).add(bx.param(pos));
    Ok(TokenSeq {
        tokens,
        role,
        modality: img.modality,
        grid,
    })
}

/// Template tokens followed by search tokens.
pub fn join_tokens<'t>(z: &VarSeq<'t>, x: &VarSeq<'t>) -> Result<VarSeq<'t>> {
    if z.modality != x.modality {
        return Err(Error::contract(format!(
            "cannot join {} template with {} search tokens",
            z.modality.as_str(),
            x.modality.as_str()
        )));
    }
    if z.role != Role::Template || x.role != Role::Search {
        return Err(Error::contract(format!("join expects template+search, got {:?}+{:?}", z.role, x.role)));
    }
    if z.tokens.cols() != x.tokens.cols() {
        return Err(Error::contract("template and search token widths differ"));
    }
    let n = z.len() + x.len();
    let tokens = if x.is_empty() {
        z.tokens
    } else {
        z.tokens.tape().concat_rows(&[z.tokens, x.tokens])
    };
    Ok(TokenSeq {
        tokens,
        role: Role::Joint,
        modality: z.modality,
        grid: (1, n),
    })
}

/// Inverse of [`join_tokens`] for a template of `z_grid` and a search part of `x_grid`.
pub fn split_tokens<'t>(h: &VarSeq<'t>, z_grid: Grid, x_grid: Grid) -> Result<(VarSeq<'t>, VarSeq<'t>)> {
    let (n_z, n_x) = (z_grid.0 * z_grid.1, x_grid.0 * x_grid.1);
    if n_z >= h.len() || n_z + n_x != h.len() {
        return Err(Error::contract(format!(
            "cannot split {} tokens into {n_z} template + {n_x} search",
            h.len()
        )));
    }
    let z = TokenSeq {
        tokens: h.tokens.slice_rows(0, n_z),
        role: Role::Template,
        modality: h.modality,
        grid: z_grid,
    };
    let x = TokenSeq {
        tokens: h.tokens.slice_rows(n_z, n_x),
        role: Role::Search,
        modality: h.modality,
        grid: x_grid,
    };
    Ok((z, x))
}
