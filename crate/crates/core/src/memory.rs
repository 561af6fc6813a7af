//! Dynamic-token lifecycle: restoring eliminated search tokens, cropping
//! them to template size with ROI Align, and the gated cache update.

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::{Config, Grid};
use crate::embedding::{Role, TokenSeq, VarSeq};
use crate::encoder::{EliminationRecord, Preserved};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::Modality;
use crate::tensor::{checkpoint, Tensor};

/// Scatters surviving tokens back to their original positions, zeros elsewhere.
pub fn restore_tokens(x: &TokenSeq, rec: &EliminationRecord) -> Result<TokenSeq> {
    check_restore(x.len(), rec)?;
    let d = x.tokens.cols();
    let mut data = vec![0.0; rec.original_len * d];
    for (i, &dst) in rec.kept_indices.iter().enumerate() {
        data[dst * d..(dst + 1) * d].copy_from_slice(x.tokens.row(i));
    }
    TokenSeq::new(Tensor::new(&[rec.original_len, d], data)?, x.role, x.modality, rec.original_grid)
}

/// Differentiable [`restore_tokens`].
pub fn restore_var<'t>(x: &VarSeq<'t>, rec: &EliminationRecord) -> Result<VarSeq<'t>> {
    check_restore(x.len(), rec)?;
    let tokens = if rec.kept_indices.len() == rec.original_len {
        x.tokens
    } else {
        x.tokens.scatter_rows(&rec.kept_indices, rec.original_len)
    };
    Ok(TokenSeq {
        tokens,
        grid: rec.original_grid,
        ..*x
    })
}

fn check_restore(len: usize, rec: &EliminationRecord) -> Result<()> {
    if len != rec.kept_indices.len() {
        return Err(Error::contract(format!(
            "restoring {len} tokens with {} kept indices",
            rec.kept_indices.len()
        )));
    }
    if rec.kept_indices.iter().any(|&i| i >= rec.original_len) {
        return Err(Error::contract("kept index beyond original length"));
    }
    Ok(())
}

/// `[N, D]` tokens to a `[rows, cols, D]` map; token `i` lands at `(i / cols, i % cols)`.
pub fn tokens_to_grid(x: &TokenSeq) -> Result<Tensor> {
    let (r, c) = x.grid;
    if x.tokens.rows() != r * c {
        return Err(Error::contract(format!("{} tokens do not fill grid {r}x{c}", x.tokens.rows())));
    }
    x.tokens.reshape(&[r, c, x.tokens.cols()])
}

pub fn grid_to_tokens(fm: &Tensor, role: Role, modality: Modality) -> Result<TokenSeq> {
    let s = fm.shape();
    if s.len() != 3 {
        return Err(Error::contract(format!("expected a [rows, cols, D] map, got {s:?}")));
    }
    TokenSeq::new(fm.reshape(&[s[0] * s[1], s[2]])?, role, modality, (s[0], s[1]))
}

/// Average of `sampling x sampling` bilinear samples per output bin.
///
/// `roi` is in grid units where cell `(r, c)` spans `[c, c+1) x [r, r+1)`;
/// sample positions are clamped to the cell centres at the border.
pub fn roi_align(fm: &Tensor, roi: &BBox, out: Grid, sampling: usize) -> Result<Tensor> {
    let s = fm.shape();
    if s.len() != 3 || s[0] == 0 || s[1] == 0 {
        return Err(Error::contract(format!("roi_align needs a non-empty [R, C, D] map, got {s:?}")));
    }
    if !(roi.w > 0.0 && roi.h > 0.0) || !roi.is_valid() {
        return Err(Error::contract(format!("roi_align needs a positive roi, got {roi:?}")));
    }
    if sampling == 0 || out.0 == 0 || out.1 == 0 {
        return Err(Error::contract("roi_align needs positive output size and sampling"));
    }
    let (rows, cols, d) = (s[0], s[1], s[2]);
    let src = fm.data();
    let (bin_h, bin_w) = (roi.h / out.0 as f64, roi.w / out.1 as f64);
    let tap = |pos: f64, n: usize| {
        let p = (pos - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = (p.floor() as usize).min(n - 1);
        let hi = (lo + 1).min(n - 1);
        (lo, hi, p - lo as f64)
    };
    let mut res = vec![0.0; out.0 * out.1 * d];
    let mut sample = vec![0.0; d];
    for or in 0..out.0 {
        for oc in 0..out.1 {
            let cell = &mut res[(or * out.1 + oc) * d..(or * out.1 + oc + 1) * d];
            let mut k = 0.0;
            for iy in 0..sampling {
                let y = roi.y + bin_h * (or as f64 + (iy as f64 + 0.5) / sampling as f64);
                let (y0, y1, ly) = tap(y, rows);
                for ix in 0..sampling {
                    let x = roi.x + bin_w * (oc as f64 + (ix as f64 + 0.5) / sampling as f64);
                    let (x0, x1, lx) = tap(x, cols);
                    let at = |r: usize, c: usize| &src[(r * cols + c) * d..(r * cols + c + 1) * d];
                    let (a, b, e, f) = (at(y0, x0), at(y0, x1), at(y1, x0), at(y1, x1));
                    for j in 0..d {
                        let top = a[j] + (b[j] - a[j]) * lx;
                        let bot = e[j] + (f[j] - e[j]) * lx;
                        sample[j] = top + (bot - top) * ly;
                    }
                    // Running mean stays exact when every sample is equal.
                    k += 1.0;
                    for (m, v) in cell.iter_mut().zip(&sample) {
                        *m += (v - *m) / k;
                    }
                }
            }
        }
    }
    Tensor::new(&[out.0, out.1, d], res)
}

/// Search tokens of both modalities captured at one preserve layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PreservedTokens {
    /// 1-based insertion layer.
    pub layer: usize,
    pub x_v: TokenSeq,
    pub x_t: TokenSeq,
    pub record: EliminationRecord,
}

impl PreservedTokens {
    pub fn from_var(p: &Preserved<'_>) -> Self {
        Self {
            layer: p.layer_index + 1,
            x_v: p.x_v.to_tensor_seq(),
            x_t: p.x_t.to_tensor_seq(),
            record: p.record.clone(),
        }
    }
}

/// Template-sized `(M_v, M_t)` per 1-based insertion layer.
pub type Staged = BTreeMap<usize, (TokenSeq, TokenSeq)>;

/// Restore, reshape, ROI-align to the template grid and flatten, per layer and modality.
///
/// `bbox` is in search-crop pixels and is divided by the patch size to reach
/// grid units. A positive `cfg.dynamic_context` widens it to a square window
/// around its centre first.
pub fn extract_dynamic_tokens(preserved: &[PreservedTokens], bbox: &BBox, cfg: &Config) -> Result<Staged> {
    let region = if cfg.dynamic_context > 0.0 {
        let side = cfg.dynamic_context * (bbox.w * bbox.h).sqrt();
        let (cx, cy) = bbox.center();
        BBox::from_center(cx, cy, side, side)
    } else {
        *bbox
    };
    let roi = region.scaled(1.0 / cfg.patch_size as f64);
    let mut staged = Staged::new();
    for p in preserved {
        if p.x_v.modality != Modality::Rgb || p.x_t.modality != Modality::Tir {
            return Err(Error::contract(format!("layer {} is missing a modality", p.layer)));
        }
        let crop = |x: &TokenSeq| -> Result<TokenSeq> {
            let full = restore_tokens(x, &p.record)?;
            let fm = roi_align(&tokens_to_grid(&full)?, &roi, cfg.template_grid(), cfg.roi_sampling)?;
            grid_to_tokens(&fm, Role::Dynamic, x.modality)
        };
        staged.insert(p.layer, (crop(&p.x_v)?, crop(&p.x_t)?));
    }
    Ok(staged)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdatePolicy {
    pub interval: usize,
    pub score_threshold: f64,
}

impl UpdatePolicy {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            interval: cfg.update_interval,
            score_threshold: cfg.score_threshold,
        }
    }

    pub fn is_open(&self, last_update_frame: usize, frame_idx: usize, score: f64) -> bool {
        frame_idx.saturating_sub(last_update_frame) >= self.interval && score > self.score_threshold
    }
}

/// Cached dynamic tokens for every insertion layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicTokenCache {
    pub entries: Staged,
    pub last_update_frame: usize,
    pub source_score: f64,
}

impl DynamicTokenCache {
    /// Named tensors `layer{L}.rgb` / `layer{L}.tir` for the checkpoint container.
    pub fn to_entries(&self) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .flat_map(|(l, (v, t))| {
                [
                    (format!("layer{l}.{}", v.modality.as_str()), v.tokens.clone()),
                    (format!("layer{l}.{}", t.modality.as_str()), t.tokens.clone()),
                ]
            })
            .collect()
    }

    pub fn dump(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_entries())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::encode(&self.to_entries())
    }
}

fn check_staged(staged: &Staged, cfg: &Config) -> Result<()> {
    let n_z = cfg.n_template();
    for (l, (v, t)) in staged {
        if v.len() != n_z || t.len() != n_z || v.tokens.rows() != n_z || t.tokens.rows() != n_z {
            return Err(Error::contract(format!("layer {l} dynamic tokens are not template-sized")));
        }
    }
    Ok(())
}

/// Seeds the cache from an initialisation pass with the ground-truth box.
pub fn init_cache(preserved: &[PreservedTokens], gt_in_search: &BBox, cfg: &Config) -> Result<DynamicTokenCache> {
    let entries = extract_dynamic_tokens(preserved, gt_in_search, cfg)?;
    check_staged(&entries, cfg)?;
    Ok(DynamicTokenCache {
        entries,
        last_update_frame: 0,
        source_score: 1.0,
    })
}

/// Replaces the cache with `staged` when both the interval and the score gate are open.
pub fn maybe_update(
    cache: &mut DynamicTokenCache,
    staged: Staged,
    frame_idx: usize,
    score: f64,
    policy: &UpdatePolicy,
    cfg: &Config,
) -> Result<bool> {
    if !cache.entries.keys().eq(staged.keys()) {
        return Err(Error::contract("staged dynamic tokens do not cover the cached layers"));
    }
    check_staged(&staged, cfg)?;
    if !policy.is_open(cache.last_update_frame, frame_idx, score) {
        return Ok(false);
    }
    cache.entries = staged;
    cache.last_update_frame = frame_idx;
    cache.source_score = score;
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Binder, Tape};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(t: Tensor, grid: Grid, m: Modality) -> TokenSeq {
        TokenSeq::new(t, Role::Search, m, grid).unwrap()
    }

    fn rec(kept: Vec<usize>, n: usize) -> EliminationRecord {
        EliminationRecord {
            layer_index: 0,
            kept_indices: kept,
            original_len: n,
            original_grid: (1, n),
        }
    }

    #[test]
    fn restore_places_tokens_and_zero_fills() {
        let x = seq(Tensor::from_rows(&[&[1.0], &[2.0]]).unwrap(), (1, 2), Modality::Rgb);
        let out = restore_tokens(&x, &rec(vec![0, 2], 3)).unwrap();
        assert_eq!(out.tokens.data(), &[1.0, 0.0, 2.0]);
        let same = restore_tokens(&x, &rec(vec![0, 1], 2)).unwrap();
        assert_eq!(same.tokens, x.tokens);
        assert!(restore_tokens(&x, &rec(vec![0], 3)).is_err());

        let tape = Tape::new();
        let bx = Binder::new(&tape, false);
        let v = restore_var(&x.lift(&bx), &rec(vec![0, 2], 3)).unwrap();
        assert_eq!(*v.tokens.value(), out.tokens);
    }

    #[test]
    fn grid_ordering() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let x = seq(Tensor::uniform(&[256, 3], 1.0, &mut r), (16, 16), Modality::Tir);
        let g = tokens_to_grid(&x).unwrap();
        assert_eq!(g.shape(), &[16, 16, 3]);
        let i = 37;
        let (row, col) = (i / 16, i % 16);
        assert_eq!(&g.data()[(row * 16 + col) * 3..(row * 16 + col + 1) * 3], x.tokens.row(i));
        let back = grid_to_tokens(&g, Role::Search, Modality::Tir).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn roi_align_hand_values() {
        let fm = Tensor::new(&[2, 2, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let full = BBox::new(0.0, 0.0, 2.0, 2.0);
        for s in [1, 2, 3] {
            let v = roi_align(&fm, &full, (1, 1), s).unwrap();
            assert!((v.data()[0] - 1.5).abs() < 1e-12);
        }
        let id = roi_align(&fm, &full, (2, 2), 1).unwrap();
        assert_eq!(id, fm);
        assert!(roi_align(&fm, &BBox::new(0.0, 0.0, 0.0, 1.0), (1, 1), 1).is_err());
    }

    /// Independent bilinear sampler: weights from the four neighbours, clamped coordinates.
    fn bilinear_oracle(fm: &Tensor, y: f64, x: f64, ch: usize) -> f64 {
        let (rows, cols, d) = (fm.shape()[0], fm.shape()[1], fm.shape()[2]);
        let py = (y - 0.5).clamp(0.0, (rows - 1) as f64);
        let px = (x - 0.5).clamp(0.0, (cols - 1) as f64);
        let mut acc = 0.0;
        for r in 0..rows {
            for c in 0..cols {
                let wy = (1.0 - (py - r as f64).abs()).max(0.0);
                let wx = (1.0 - (px - c as f64).abs()).max(0.0);
                acc += wy * wx * fm.data()[(r * cols + c) * d + ch];
            }
        }
        acc
    }

    #[test]
    fn roi_align_matches_brute_force_bilinear() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let fm = Tensor::uniform(&[5, 6, 2], 1.0, &mut r);
        let roi = BBox::new(0.7, -0.4, 4.1, 3.3);
        let (out, s) = ((3, 2), 2);
        let got = roi_align(&fm, &roi, out, s).unwrap();
        for or in 0..out.0 {
            for oc in 0..out.1 {
                for ch in 0..2 {
                    let mut acc = 0.0;
                    for iy in 0..s {
                        for ix in 0..s {
                            let y = roi.y + roi.h / out.0 as f64 * (or as f64 + (iy as f64 + 0.5) / s as f64);
                            let x = roi.x + roi.w / out.1 as f64 * (oc as f64 + (ix as f64 + 0.5) / s as f64);
                            acc += bilinear_oracle(&fm, y, x, ch);
                        }
                    }
                    let want = acc / (s * s) as f64;
                    assert!((got.data()[(or * out.1 + oc) * 2 + ch] - want).abs() < 1e-12);
                }
            }
        }
    }

    fn preserved(grid: Grid, d: usize, r: &mut ChaCha8Rng) -> PreservedTokens {
        let n = grid.0 * grid.1;
        PreservedTokens {
            layer: 1,
            x_v: seq(Tensor::uniform(&[n, d], 1.0, r), grid, Modality::Rgb),
            x_t: seq(Tensor::uniform(&[n, d], 1.0, r), grid, Modality::Tir),
            record: EliminationRecord::identity(0, grid),
        }
    }

    fn identity_cfg() -> Config {
        let mut cfg = Config::tiny();
        cfg.template_size = cfg.search_size;
        cfg.roi_sampling = 1;
        cfg
    }

    #[test]
    fn full_extent_extraction_is_identity() {
        let cfg = identity_cfg();
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let p = preserved(cfg.search_grid(), cfg.embed_dim, &mut r);
        let s = cfg.search_size as f64;
        let staged = extract_dynamic_tokens(&[p.clone()], &BBox::new(0.0, 0.0, s, s), &cfg).unwrap();
        let (v, t) = &staged[&1];
        assert!(v.tokens.max_abs_diff(&p.x_v.tokens) <= 1e-6);
        assert!(t.tokens.max_abs_diff(&p.x_t.tokens) <= 1e-6);
        assert_eq!(v.role, Role::Dynamic);

        let cache = init_cache(&[p.clone()], &BBox::new(0.0, 0.0, s, s), &cfg).unwrap();
        assert_eq!(cache.last_update_frame, 0);
        assert!(cache.entries[&1].0.tokens.max_abs_diff(&p.x_v.tokens) <= 1e-6);
        assert_eq!(cache, init_cache(&[p], &BBox::new(0.0, 0.0, s, s), &cfg).unwrap());
    }

    #[test]
    fn constant_tokens_stay_constant() {
        let cfg = Config::tiny();
        let n = cfg.n_search();
        let p = PreservedTokens {
            layer: 2,
            x_v: seq(Tensor::full(&[n, cfg.embed_dim], 0.37), cfg.search_grid(), Modality::Rgb),
            x_t: seq(Tensor::full(&[n, cfg.embed_dim], -1.1), cfg.search_grid(), Modality::Tir),
            record: EliminationRecord::identity(1, cfg.search_grid()),
        };
        let staged = extract_dynamic_tokens(&[p], &BBox::new(3.0, 5.5, 11.0, 7.0), &cfg).unwrap();
        let (v, t) = &staged[&2];
        assert_eq!(v.len(), cfg.n_template());
        assert!(v.tokens.data().iter().all(|&x| x == 0.37));
        assert!(t.tokens.data().iter().all(|&x| x == -1.1));
    }

    #[test]
    fn eliminated_extraction_matches_composed_oracle() {
        let cfg = Config::tiny();
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let kept = vec![0, 2, 3, 5, 8, 9, 12, 15];
        let d = cfg.embed_dim;
        let p = PreservedTokens {
            layer: 1,
            x_v: seq(Tensor::uniform(&[8, d], 1.0, &mut r), (1, 8), Modality::Rgb),
            x_t: seq(Tensor::uniform(&[8, d], 1.0, &mut r), (1, 8), Modality::Tir),
            record: EliminationRecord {
                layer_index: 0,
                kept_indices: kept.clone(),
                original_len: 16,
                original_grid: (4, 4),
            },
        };
        let bbox = BBox::new(4.5, 9.0, 17.0, 12.5);
        let staged = extract_dynamic_tokens(&[p.clone()], &bbox, &cfg).unwrap();
        // Oracle: scatter by hand into a 4x4 map, then sample with the brute-force bilinear weights.
        let mut full = vec![0.0; 16 * d];
        for (i, &k) in kept.iter().enumerate() {
            full[k * d..(k + 1) * d].copy_from_slice(p.x_v.tokens.row(i));
        }
        let fm = Tensor::new(&[4, 4, d], full).unwrap();
        let roi = bbox.scaled(1.0 / cfg.patch_size as f64);
        let (g, s) = (cfg.template_grid(), cfg.roi_sampling);
        let got = &staged[&1].0.tokens;
        for or in 0..g.0 {
            for oc in 0..g.1 {
                for ch in 0..d {
                    let mut acc = 0.0;
                    for iy in 0..s {
                        for ix in 0..s {
                            let y = roi.y + roi.h / g.0 as f64 * (or as f64 + (iy as f64 + 0.5) / s as f64);
                            let x = roi.x + roi.w / g.1 as f64 * (oc as f64 + (ix as f64 + 0.5) / s as f64);
                            acc += bilinear_oracle(&fm, y, x, ch);
                        }
                    }
                    assert!((got.row(or * g.1 + oc)[ch] - acc / (s * s) as f64).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn update_gate() {
        let cfg = Config::tiny();
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let p = preserved(cfg.search_grid(), cfg.embed_dim, &mut r);
        let bbox = BBox::new(8.0, 8.0, 16.0, 16.0);
        let mut cache = init_cache(&[p], &bbox, &cfg).unwrap();
        let fresh = extract_dynamic_tokens(&[preserved(cfg.search_grid(), cfg.embed_dim, &mut r)], &bbox, &cfg).unwrap();
        let policy = UpdatePolicy {
            interval: 25,
            score_threshold: 0.65,
        };
        let before = cache.to_bytes();
        assert!(!maybe_update(&mut cache, fresh.clone(), 30, 0.5, &policy, &cfg).unwrap());
        assert!(!maybe_update(&mut cache, fresh.clone(), 10, 0.9, &policy, &cfg).unwrap());
        assert!(!maybe_update(&mut cache, fresh.clone(), 30, 0.65, &policy, &cfg).unwrap());
        assert_eq!(cache.to_bytes(), before);
        assert!(maybe_update(&mut cache, fresh.clone(), 30, 0.9, &policy, &cfg).unwrap());
        assert_eq!(cache.last_update_frame, 30);
        assert_eq!(cache.entries, fresh);
        assert_eq!(cache.to_entries()[0].0, "layer1.rgb");
        assert!(maybe_update(&mut cache, Staged::new(), 90, 0.9, &policy, &cfg).is_err());
    }

    proptest! {
        #[test]
        fn restore_zeroes_exactly_the_complement(
            mask in proptest::collection::vec(any::<bool>(), 1..40),
            seed in any::<u64>(),
        ) {
            let n = mask.len();
            let kept: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let vals: Vec<f64> = (0..kept.len() * 2).map(|_| rand::Rng::gen_range(&mut r, 0.5..1.5)).collect();
            let x = seq(Tensor::new(&[kept.len(), 2], vals).unwrap(), (1, kept.len()), Modality::Rgb);
            let out = restore_tokens(&x, &rec(kept.clone(), n)).unwrap();
            for i in 0..n {
                let row = out.tokens.row(i);
                prop_assert_eq!(row.iter().all(|&v| v == 0.0), !mask[i]);
            }
            let again: Vec<f64> = kept.iter().flat_map(|&k| out.tokens.row(k).to_vec()).collect();
            prop_assert_eq!(&again[..], x.tokens.data());
        }

        #[test]
        fn grid_round_trip(rows in 1usize..6, cols in 1usize..6, d in 1usize..4, seed in any::<u64>()) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let x = seq(Tensor::uniform(&[rows * cols, d], 1.0, &mut r), (rows, cols), Modality::Tir);
            let back = grid_to_tokens(&tokens_to_grid(&x).unwrap(), Role::Search, Modality::Tir).unwrap();
            prop_assert_eq!(back.tokens.to_le_bytes(), x.tokens.to_le_bytes());
        }

        #[test]
        fn roi_align_constant_maps(c in -5.0f64..5.0, x in -3.0f64..6.0, y in -3.0f64..6.0, w in 0.1f64..8.0, h in 0.1f64..8.0, s in 1usize..4) {
            let fm = Tensor::full(&[4, 5, 2], c);
            let out = roi_align(&fm, &BBox::new(x, y, w, h), (3, 3), s).unwrap();
            prop_assert!(out.data().iter().all(|&v| v == c));
        }
    }
}
