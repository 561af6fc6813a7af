//! Built-in verification suite: finite-difference gradient checks, STMT
//! identity invariants, memory-pipeline exactness and metric oracles.

use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, Grid};
use crate::embedding::{Role, TokenSeq};
use crate::encoder::{EliminationRecord, Layout};
use crate::error::Result;
use crate::evaluation::{evaluate, iou, ope_curves};
use crate::geometry::BBox;
use crate::image::{ModalImage, Modality};
use crate::memory::{extract_dynamic_tokens, grid_to_tokens, restore_tokens, roi_align, tokens_to_grid, PreservedTokens};
use crate::model::StmtModel;
use crate::stmt::{stmt_forward, Dynamic, StmtLayerParams};
use crate::tensor::{grad_check, Binder, GradCheckOptions, Tape, Tensor, Var, LN_EPS};

/// Relative-error bound for every gradient check.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Wall-clock budget for the whole gradient suite, seconds.
pub const GRAD_BUDGET_SECS: f64 = 120.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub criterion: u8,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(criterion: u8, name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            criterion,
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    fn from_result(criterion: u8, name: impl Into<String>, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Self::new(criterion, name, passed, detail),
            Err(e) => Self::new(criterion, name, false, format!("error: {e}")),
        }
    }
}

/// Fixed, non-uniform weights so a weighted sum exercises every output entry.
fn weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| (1.3 * i as f64 + 0.2).sin()).collect()
}

fn project<'t>(bx: &Binder<'t>, v: Var<'t>) -> Var<'t> {
    let w = Tensor::new(&v.shape(), weights(v.value().len())).expect("same shape");
    v.mul(bx.constant(w)).sum()
}

type Build = dyn for<'t> Fn(&Binder<'t>, &[Var<'t>]) -> Var<'t>;

fn grad_case(name: &str, shape_index: usize, mut params: Vec<Tensor>, build: &Build) -> Check {
    let label = format!("grad {name} #{shape_index} {:?}", params.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>());
    let r = grad_check(
        &mut params,
        |p, bx| {
            let vars: Vec<Var<'_>> = p.iter().map(|t| bx.param(t)).collect();
            Ok(build(bx, &vars))
        },
        &GradCheckOptions::default(),
    );
    Check::from_result(
        2,
        label,
        r.map(|rep| (rep.max_rel_err <= GRAD_TOLERANCE, format!("max rel err {:.2e} over {} coords", rep.max_rel_err, rep.checked))),
    )
}

fn shape2<R: Rng>(r: &mut R) -> (usize, usize) {
    (r.gen_range(2..=4), r.gen_range(2..=5))
}

/// Central-difference checks of every tape operation on three random shapes
/// each, then of `stmt_forward` and the full model.
pub fn gradient_suite() -> Vec<Check> {
    let start = Instant::now();
    let mut checks = Vec::new();
    let mut r = ChaCha8Rng::seed_from_u64(0x6772_6164);
    for k in 0..3 {
        let u = |shape: &[usize], r: &mut ChaCha8Rng| Tensor::uniform(shape, 1.0, r);
        let (m, n) = shape2(&mut r);
        let kk = r.gen_range(2..=4);
        checks.push(grad_case("matmul", k, vec![u(&[m, kk], &mut r), u(&[kk, n], &mut r)], &|bx, v| project(bx, v[0].matmul(v[1]))));
        checks.push(grad_case("matmul_t", k, vec![u(&[m, kk], &mut r), u(&[n, kk], &mut r)], &|bx, v| project(bx, v[0].matmul_t(v[1]))));
        checks.push(grad_case("add", k, vec![u(&[m, n], &mut r), u(&[m, n], &mut r)], &|bx, v| project(bx, v[0].add(v[1]))));
        checks.push(grad_case("sub", k, vec![u(&[m, n], &mut r), u(&[m, n], &mut r)], &|bx, v| project(bx, v[0].sub(v[1]))));
        checks.push(grad_case("mul", k, vec![u(&[m, n], &mut r), u(&[m, n], &mut r)], &|bx, v| project(bx, v[0].mul(v[1]))));
        checks.push(grad_case("add_row", k, vec![u(&[m, n], &mut r), u(&[n], &mut r)], &|bx, v| project(bx, v[0].add_row(v[1]))));
        checks.push(grad_case("scale", k, vec![u(&[m, n], &mut r)], &|bx, v| project(bx, v[0].scale(-0.7))));
        checks.push(grad_case("gelu", k, vec![u(&[m, n], &mut r)], &|bx, v| project(bx, v[0].scale(2.0).gelu())));
        checks.push(grad_case("sigmoid", k, vec![u(&[m, n], &mut r)], &|bx, v| project(bx, v[0].scale(2.0).sigmoid())));
        checks.push(grad_case("softmax_rows", k, vec![u(&[m, n], &mut r)], &|bx, v| project(bx, v[0].softmax_rows())));
        checks.push(grad_case(
            "layer_norm",
            k,
            vec![u(&[m, n], &mut r), u(&[n], &mut r), u(&[n], &mut r)],
            &|bx, v| project(bx, v[0].layer_norm(v[1], v[2], LN_EPS)),
        ));
        let heads = k + 1;
        let dh = heads * r.gen_range(1..=3);
        let (nq, nk) = (r.gen_range(1..=4), r.gen_range(1..=5));
        checks.push(grad_case(
            &format!("attention(heads={heads})"),
            k,
            vec![u(&[nq, dh], &mut r), u(&[nk, dh], &mut r), u(&[nk, dh], &mut r)],
            &move |bx, v| project(bx, v[0].attention(v[1], v[2], heads)),
        ));
        checks.push(grad_case("slice_rows", k, vec![u(&[m + 1, n], &mut r)], &|bx, v| project(bx, v[0].slice_rows(1, v[0].rows() - 1))));
        checks.push(grad_case("slice_cols", k, vec![u(&[m, n + 1], &mut r)], &|bx, v| project(bx, v[0].slice_cols(1, v[0].cols() - 1))));
        checks.push(grad_case(
            "concat_rows",
            k,
            vec![u(&[m, n], &mut r), u(&[kk, n], &mut r)],
            &|bx, v| project(bx, bx.tape().concat_rows(&[v[0], v[1]])),
        ));
        checks.push(grad_case(
            "concat_cols",
            k,
            vec![u(&[m, n], &mut r), u(&[m, kk], &mut r)],
            &|bx, v| project(bx, bx.tape().concat_cols(&[v[0], v[1]])),
        ));
        let gather: Vec<usize> = (0..m + 2).map(|_| r.gen_range(0..m)).collect();
        checks.push(grad_case("gather_rows", k, vec![u(&[m, n], &mut r)], &move |bx, v| project(bx, v[0].gather_rows(&gather))));
        let total = m + 3;
        let mut scatter = index::sample(&mut r, total, m).into_vec();
        scatter.sort_unstable();
        checks.push(grad_case("scatter_rows", k, vec![u(&[m, n], &mut r)], &move |bx, v| project(bx, v[0].scatter_rows(&scatter, total))));
        checks.push(grad_case("reshape", k, vec![u(&[m, n], &mut r)], &|bx, v| project(bx, v[0].reshape(&[v[0].cols(), v[0].rows()]))));
        checks.push(grad_case("sum", k, vec![u(&[m, n], &mut r)], &|_, v| v[0].mul(v[0]).sum()));
        checks.push(grad_case("mean", k, vec![u(&[m, n], &mut r)], &|_, v| v[0].mul(v[0]).mean()));
        let target: Vec<f64> = (0..m * n).map(|_| r.gen_range(0.0..=1.0)).collect();
        checks.push(grad_case("bce_with_logits", k, vec![u(&[m, n], &mut r)], &move |_, v| v[0].scale(3.0).bce_with_logits(&target)));
        // Targets sit at least 0.2 away from the inputs so the kink is never crossed.
        let x = u(&[m, n], &mut r);
        let l1_target: Vec<f64> = x
            .data()
            .iter()
            .map(|&v| v + if r.gen::<bool>() { 1.0 } else { -1.0 } * r.gen_range(0.2..1.0))
            .collect();
        checks.push(grad_case("l1", k, vec![x], &move |_, v| v[0].l1(&l1_target)));
    }
    for k in 0..3 {
        checks.push(stmt_gradient_case(k));
    }
    checks.push(model_gradient_case());
    let secs = start.elapsed().as_secs_f64();
    checks.push(Check::new(
        2,
        "gradient suite runtime",
        secs < GRAD_BUDGET_SECS,
        format!("{secs:.1}s (budget {GRAD_BUDGET_SECS}s)"),
    ));
    checks
}

/// Small STMT configurations of different widths, head counts and grids.
fn stmt_shape(k: usize) -> Config {
    let (d, heads, z, x) = [(8, 2, 16, 32), (12, 3, 16, 24), (16, 4, 8, 24)][k % 3];
    Config {
        embed_dim: d,
        heads,
        template_size: z,
        search_size: x,
        ..Config::tiny()
    }
}

struct StmtFixture {
    cfg: Config,
    params: StmtLayerParams,
    tokens: Vec<Tensor>,
}

fn stmt_fixture(k: usize, seed: u64) -> StmtFixture {
    let cfg = stmt_shape(k);
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let params = StmtLayerParams::init(&cfg, true, &mut r).expect("valid config");
    let (n, nz, d) = (cfg.n_template() + cfg.n_search(), cfg.n_template(), cfg.embed_dim);
    let tokens = vec![
        Tensor::uniform(&[n, d], 1.0, &mut r),
        Tensor::uniform(&[n, d], 1.0, &mut r),
        Tensor::uniform(&[nz, d], 1.0, &mut r),
        Tensor::uniform(&[nz, d], 1.0, &mut r),
    ];
    StmtFixture { cfg, params, tokens }
}

/// Runs the fusion layer (layer 2 of the tiny configs) on both joint streams.
fn run_stmt<'t>(bx: &Binder<'t>, cfg: &Config, params: &StmtLayerParams, t: &[Tensor]) -> Result<(Var<'t>, Var<'t>)> {
    let layout = Layout {
        z_grid: cfg.template_grid(),
        x_grid: cfg.search_grid(),
    };
    let joint = |t: &Tensor, m| TokenSeq {
        tokens: bx.param(t),
        role: Role::Joint,
        modality: m,
        grid: (1, t.rows()),
    };
    let dynamic = |t: &Tensor, m| TokenSeq {
        tokens: bx.param(t),
        role: Role::Dynamic,
        modality: m,
        grid: cfg.template_grid(),
    };
    let pair = (dynamic(&t[2], Modality::Rgb), dynamic(&t[3], Modality::Tir));
    let lookup = move |_l: usize| Some(pair);
    let (a, b) = stmt_forward(
        bx,
        cfg,
        2,
        params,
        &joint(&t[0], Modality::Rgb),
        &joint(&t[1], Modality::Tir),
        &layout,
        Dynamic::Active(&lookup),
    )?;
    Ok((a.tokens, b.tokens))
}

fn stmt_gradient_case(k: usize) -> Check {
    let f = stmt_fixture(k, 100 + k as u64);
    let cfg = f.cfg.clone();
    let mut model = (f.params, f.tokens);
    let opts = GradCheckOptions {
        exhaustive_limit: 0,
        sample: 3000,
        seed: k as u64,
        ..Default::default()
    };
    let r = grad_check(
        &mut model,
        |(p, t), bx| {
            let (a, b) = run_stmt(bx, &cfg, p, t)?;
            Ok(project(bx, a).add(project(bx, b.gelu())))
        },
        &opts,
    );
    Check::from_result(
        2,
        format!("grad stmt_forward #{k} (D={}, heads={}, N_z={}, N_x={})", cfg.embed_dim, cfg.heads, cfg.n_template(), cfg.n_search()),
        r.map(|rep| (rep.max_rel_err <= GRAD_TOLERANCE, format!("max rel err {:.2e} over {} coords", rep.max_rel_err, rep.checked))),
    )
}

fn model_gradient_case() -> Check {
    // Random STMT outputs so every STMT weight carries gradient.
    let cfg = Config {
        stmt_zero_init: false,
        ..Config::tiny()
    };
    let r = (|| -> Result<(bool, String)> {
        let mut model = StmtModel::new(&cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut img = |s: usize, m: Modality| {
            let t = Tensor::uniform(&[s, s, m.channels()], 0.5, &mut rng);
            ModalImage::new(Tensor::new(t.shape(), t.data().iter().map(|v| v + 0.5).collect())?, m)
        };
        let (zv, zt) = (img(cfg.template_size, Modality::Rgb)?, img(cfg.template_size, Modality::Tir)?);
        let (xv, xt) = (img(cfg.search_size, Modality::Rgb)?, img(cfg.search_size, Modality::Tir)?);
        let dynamic_tokens = [
            Tensor::uniform(&[cfg.n_template(), cfg.embed_dim], 1.0, &mut rng),
            Tensor::uniform(&[cfg.n_template(), cfg.embed_dim], 1.0, &mut rng),
        ];
        let opts = GradCheckOptions {
            exhaustive_limit: 0,
            sample: 1500,
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
                let pair = (seq(&dynamic_tokens[0], Modality::Rgb), seq(&dynamic_tokens[1], Modality::Tir));
                let lookup = move |_l: usize| Some(pair);
                let out = m.forward(bx, &cfg, &z_v, &z_t, &x_v, &x_t, Dynamic::Active(&lookup))?;
                Ok(project(bx, out.head.logits).add(project(bx, out.head.offsets)).add(project(bx, out.head.sizes)))
            },
            &opts,
        )?;
        Ok((rep.max_rel_err <= GRAD_TOLERANCE, format!("max rel err {:.2e} over {} coords", rep.max_rel_err, rep.checked)))
    })();
    Check::from_result(2, "grad full model", r)
}

/// Zeroed residual projections and disabled flags both leave the streams bit-identical.
pub fn identity_suite() -> Vec<Check> {
    let mut checks = Vec::new();
    for k in 0..3 {
        let f = stmt_fixture(k, 200 + k as u64);
        let r = (|| -> Result<(bool, String)> {
            let tape = Tape::new();
            let bx = Binder::new(&tape, false);
            let mut zeroed = f.params.clone();
            zeroed.zero_residuals();
            let (a, b) = run_stmt(&bx, &f.cfg, &zeroed, &f.tokens)?;
            let same = a.value().to_le_bytes() == f.tokens[0].to_le_bytes() && b.value().to_le_bytes() == f.tokens[1].to_le_bytes();
            Ok((same, format!("D={} heads={}", f.cfg.embed_dim, f.cfg.heads)))
        })();
        checks.push(Check::from_result(3, format!("zeroed CA/TF residuals give identity #{k}"), r));

        let r = (|| -> Result<(bool, String)> {
            let tape = Tape::new();
            let bx = Binder::new(&tape, false);
            let cfg = Config {
                enable_modality_enhancement: false,
                enable_dynamic_tokens: false,
                ..f.cfg.clone()
            };
            let (a, b) = run_stmt(&bx, &cfg, &f.params, &f.tokens)?;
            let same = a.value().to_le_bytes() == f.tokens[0].to_le_bytes() && b.value().to_le_bytes() == f.tokens[1].to_le_bytes();
            Ok((same, format!("D={} heads={}", f.cfg.embed_dim, f.cfg.heads)))
        })();
        checks.push(Check::from_result(3, format!("disabled flags give identity #{k}"), r));
    }
    checks
}

/// Bilinear value at continuous grid position `(y, x)` written as a tent-kernel
/// sum over every cell, with cell centres at `+0.5` and clamping to the border centres.
fn tent_sample(fm: &Tensor, y: f64, x: f64, ch: usize) -> f64 {
    let s = fm.shape();
    let (rows, cols, d) = (s[0], s[1], s[2]);
    let py = (y - 0.5).clamp(0.0, (rows - 1) as f64);
    let px = (x - 0.5).clamp(0.0, (cols - 1) as f64);
    let mut acc = 0.0;
    for r in 0..rows {
        let wy = (1.0 - (py - r as f64).abs()).max(0.0);
        if wy == 0.0 {
            continue;
        }
        for c in 0..cols {
            let wx = (1.0 - (px - c as f64).abs()).max(0.0);
            acc += wy * wx * fm.data()[(r * cols + c) * d + ch];
        }
    }
    acc
}

fn brute_roi_align(fm: &Tensor, roi: &BBox, out: Grid, sampling: usize) -> Vec<f64> {
    let d = fm.shape()[2];
    let mut res = Vec::with_capacity(out.0 * out.1 * d);
    for or in 0..out.0 {
        for oc in 0..out.1 {
            for ch in 0..d {
                let mut acc = 0.0;
                for iy in 0..sampling {
                    for ix in 0..sampling {
                        let y = roi.y + roi.h * (or as f64 + (iy as f64 + 0.5) / sampling as f64) / out.0 as f64;
                        let x = roi.x + roi.w * (oc as f64 + (ix as f64 + 0.5) / sampling as f64) / out.1 as f64;
                        acc += tent_sample(fm, y, x, ch);
                    }
                }
                res.push(acc / (sampling * sampling) as f64);
            }
        }
    }
    res
}

/// Restore and reshape round trips, ROI Align constant-map invariance and
/// full-extent identity.
pub fn memory_suite() -> Vec<Check> {
    let mut checks = Vec::new();
    let mut r = ChaCha8Rng::seed_from_u64(0x006d_656d);
    for k in 0..3 {
        let grid = (r.gen_range(2..=5), r.gen_range(2..=5));
        let n = grid.0 * grid.1;
        let d = r.gen_range(1..=6);
        let keep = r.gen_range(1..=n);
        let mut kept = index::sample(&mut r, n, keep).into_vec();
        kept.sort_unstable();
        let x = Tensor::uniform(&[keep, d], 1.0, &mut r);
        let res = (|| -> Result<(bool, String)> {
            let rec = EliminationRecord {
                layer_index: 0,
                kept_indices: kept.clone(),
                original_len: n,
                original_grid: grid,
            };
            let seq = TokenSeq::new(x.clone(), Role::Search, Modality::Rgb, (1, keep))?;
            let full = restore_tokens(&seq, &rec)?;
            let mut ok = true;
            for i in 0..n {
                let row = full.tokens.row(i);
                match kept.iter().position(|&j| j == i) {
                    Some(p) => ok &= row.iter().zip(x.row(p)).all(|(a, b)| a.to_bits() == b.to_bits()),
                    None => ok &= row.iter().all(|v| v.to_bits() == 0),
                }
            }
            let back = grid_to_tokens(&tokens_to_grid(&full)?, Role::Search, Modality::Rgb)?;
            ok &= back.tokens.to_le_bytes() == full.tokens.to_le_bytes() && back.grid == grid;
            Ok((ok, format!("grid {grid:?}, D={d}, kept {keep}/{n}")))
        })();
        checks.push(Check::from_result(4, format!("restore/reshape round trip bitwise #{k}"), res));

        let c: f64 = r.gen_range(-5.0..5.0);
        let fm = Tensor::full(&[grid.0, grid.1, d], c);
        let roi = BBox::new(r.gen_range(-2.0..4.0), r.gen_range(-2.0..4.0), r.gen_range(0.1..6.0), r.gen_range(0.1..6.0));
        let sampling = r.gen_range(1..=3);
        let out = (r.gen_range(1..=4), r.gen_range(1..=4));
        let res = roi_align(&fm, &roi, out, sampling).map(|t| {
            (
                t.data().iter().all(|v| v.to_bits() == c.to_bits()),
                format!("c={c:.4}, roi {roi:?}, out {out:?}, sampling {sampling}"),
            )
        });
        checks.push(Check::from_result(4, format!("ROI Align constant map exact #{k}"), res));

        let fm = Tensor::uniform(&[grid.0, grid.1, d], 1.0, &mut r);
        let full_roi = BBox::new(0.0, 0.0, grid.1 as f64, grid.0 as f64);
        let res = (|| -> Result<(bool, String)> {
            let got = roi_align(&fm, &full_roi, grid, sampling)?;
            let oracle = brute_roi_align(&fm, &full_roi, grid, sampling);
            let vs_oracle = got.data().iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let ident = roi_align(&fm, &full_roi, grid, 1)?.max_abs_diff(&fm);
            Ok((
                vs_oracle <= 1e-6 && ident <= 1e-6,
                format!("vs oracle {vs_oracle:.1e}, identity {ident:.1e}"),
            ))
        })();
        checks.push(Check::from_result(4, format!("ROI Align full extent #{k}"), res));
    }

    let res = (|| -> Result<(bool, String)> {
        let cfg = Config {
            template_size: 32,
            roi_sampling: 1,
            ..Config::tiny()
        };
        let (grid, d) = (cfg.search_grid(), cfg.embed_dim);
        let n = grid.0 * grid.1;
        let x_v = TokenSeq::new(Tensor::uniform(&[n, d], 1.0, &mut r), Role::Search, Modality::Rgb, grid)?;
        let x_t = TokenSeq::new(Tensor::uniform(&[n, d], 1.0, &mut r), Role::Search, Modality::Tir, grid)?;
        let p = PreservedTokens {
            layer: 1,
            x_v: x_v.clone(),
            x_t: x_t.clone(),
            record: EliminationRecord::identity(0, grid),
        };
        let s = cfg.search_size as f64;
        let staged = extract_dynamic_tokens(&[p], &BBox::new(0.0, 0.0, s, s), &cfg)?;
        let (v, t) = &staged[&1];
        let err = v.tokens.max_abs_diff(&x_v.tokens).max(t.tokens.max_abs_diff(&x_t.tokens));
        Ok((err <= 1e-6, format!("max abs diff {err:.1e}")))
    })();
    checks.push(Check::from_result(4, "dynamic-token extraction over the full search crop is identity", res));
    checks
}

/// Pixel-count IoU of boxes with integer corners.
fn pixel_count_iou(a: &BBox, b: &BBox) -> f64 {
    let cover = |r: &BBox, x: i64, y: i64| {
        let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
        cx > r.x && cx < r.x + r.w && cy > r.y && cy < r.y + r.h
    };
    let (mut i, mut u) = (0usize, 0usize);
    for y in -4..16 {
        for x in -4..16 {
            let (p, q) = (cover(a, x, y), cover(b, x, y));
            i += (p && q) as usize;
            u += (p || q) as usize;
        }
    }
    i as f64 / u as f64
}

pub fn metric_suite() -> Vec<Check> {
    let a = BBox::new(0.0, 0.0, 2.0, 2.0);
    let b = BBox::new(1.0, 1.0, 2.0, 2.0);
    let v = iou(&a, &b);
    let oracle = pixel_count_iou(&a, &b);
    let mut checks = vec![Check::new(
        5,
        "iou((0,0,2,2),(1,1,2,2)) = 1/7",
        (v - 1.0 / 7.0).abs() <= 1e-12 && (oracle - 1.0 / 7.0).abs() <= 1e-12,
        format!("iou {v:.15}, pixel count {oracle:.15}"),
    )];
    let pr = ope_curves(&[5.0, 25.0], &[Some(0.0), Some(0.0)], &[1.0, 1.0]).map(|r| (r.pr20 == 0.5, format!("PR@20 = {}", r.pr20)));
    checks.push(Check::from_result(5, "errors [5, 25] give PR@20 = 0.5", pr));
    let g = BBox::new(4.0, 6.0, 12.0, 9.0);
    let perfect = evaluate(&[g; 10], &[g; 10]).map(|r| {
        (
            r.pr20 == 1.0 && r.npr == 1.0 && r.sr == 1.0,
            format!("PR {} NPR {} SR {}", r.pr20, r.npr, r.sr),
        )
    });
    checks.push(Check::from_result(5, "perfect trace gives PR = NPR = SR = 1", perfect));
    checks
}

pub fn run_all() -> Vec<Check> {
    let mut all = gradient_suite();
    all.extend(identity_suite());
    all.extend(memory_suite());
    all.extend(metric_suite());
    all
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tent_oracle_matches_direct_bilinear() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let fm = Tensor::uniform(&[3, 4, 1], 1.0, &mut r);
        // Half-way between the first two cell centres of row 0.
        let want = 0.5 * (fm.data()[0] + fm.data()[1]);
        assert!((tent_sample(&fm, 0.5, 1.0, 0) - want).abs() < 1e-15);
        assert_eq!(tent_sample(&fm, -3.0, -3.0, 0), fm.data()[0]);
    }

    #[test]
    fn identity_memory_and_metric_suites_pass() {
        for c in identity_suite().into_iter().chain(memory_suite()).chain(metric_suite()) {
            assert!(c.passed, "{c:?}");
        }
    }
}
