//! Temporal-sampling training.
//!
//! Each sample pairs a template/search crop pair S with a second pair T from
//! other frames of the same sequence. The T template tokens at every insertion
//! layer stand in for the dynamic tokens the tracker would have cached, and
//! the loss on S trains the whole network in one graph.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, Grid};
use crate::embedding::Role;
use crate::error::{Error, Result};
use crate::geometry::{crop_window, BBox};
use crate::image::ModalImage;
use crate::io::Sequence;
use crate::model::StmtModel;
use crate::stmt::{as_dynamic, Dynamic, DynamicPair};
use crate::tensor::checkpoint::{save_params, write_atomic};
use crate::tensor::ops::Parameterized;
use crate::tensor::{Binder, Tape, Tensor, Var};

/// Frames drawn for one sample; all four are distinct.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameChoice {
    pub s_template: usize,
    pub s_search: usize,
    pub t_template: usize,
    pub t_search: usize,
}

impl FrameChoice {
    pub fn as_array(&self) -> [usize; 4] {
        [self.s_template, self.s_search, self.t_template, self.t_search]
    }
}

/// Template and search crops of both modalities plus the target box in
/// search-crop pixels.
#[derive(Clone, Debug)]
pub struct Crops {
    pub z_rgb: ModalImage,
    pub z_tir: ModalImage,
    pub x_rgb: ModalImage,
    pub x_tir: ModalImage,
    pub gt: BBox,
}

#[derive(Clone, Debug)]
pub struct TrainSample {
    pub frames: FrameChoice,
    pub s: Crops,
    pub t: Crops,
}

/// Four distinct frames, uniformly over ordered draws; `None` below four frames.
pub fn choose_frames<R: Rng>(len: usize, rng: &mut R) -> Option<FrameChoice> {
    if len < 4 {
        return None;
    }
    let v = index::sample(rng, len, 4).into_vec();
    Some(FrameChoice {
        s_template: v[0],
        s_search: v[1],
        t_template: v[2],
        t_search: v[3],
    })
}

/// Shifts the box centre by up to `shift * sqrt(w h)` per axis and rescales
/// it by `exp(scale * u)` with `u` uniform in `[-1, 1]`.
pub fn jitter_box<R: Rng>(b: &BBox, shift: f64, scale: f64, rng: &mut R) -> BBox {
    let side = (b.w * b.h).sqrt();
    let (cx, cy) = b.center();
    let dx = shift * side * rng.gen_range(-1.0..=1.0);
    let dy = shift * side * rng.gen_range(-1.0..=1.0);
    let s = (scale * rng.gen_range(-1.0..=1.0)).exp();
    BBox::from_center(cx + dx, cy + dy, b.w * s, b.h * s)
}

/// Crops a template around the ground truth of `template` and a jittered
/// search region around the ground truth of `search`. With `temporal`, the
/// template box is jittered by the dynamic-token jitter as well.
pub fn make_crops<R: Rng>(
    seq: &Sequence,
    template: usize,
    search: usize,
    cfg: &Config,
    temporal: bool,
    rng: &mut R,
) -> Result<Crops> {
    let (zr, zt) = &seq.frames[template];
    let mut z_box = seq.groundtruth[template];
    if temporal {
        z_box = jitter_box(&z_box, cfg.dynamic_jitter_shift, cfg.dynamic_jitter_scale, rng);
    }
    let z = crop_window(zr, zt, &z_box, None, cfg.template_factor, cfg.template_size)?;
    let gt = seq.groundtruth[search];
    let center = jitter_box(&gt, cfg.jitter_shift, cfg.jitter_scale, rng);
    let (xr, xt) = &seq.frames[search];
    let x = crop_window(xr, xt, &center, Some(&gt), cfg.search_factor, cfg.search_size)?;
    Ok(Crops {
        z_rgb: z.rgb,
        z_tir: z.tir,
        x_rgb: x.rgb,
        x_tir: x.tir,
        gt: x.window.image_to_crop(&gt),
    })
}

/// Draws S and T from one sequence; `None` when the sequence is too short.
pub fn sample_pairs<R: Rng>(seq: &Sequence, cfg: &Config, rng: &mut R) -> Result<Option<TrainSample>> {
    let Some(frames) = choose_frames(seq.len(), rng) else {
        return Ok(None);
    };
    let s = make_crops(seq, frames.s_template, frames.s_search, cfg, false, rng)?;
    let t = make_crops(seq, frames.t_template, frames.t_search, cfg, true, rng)?;
    Ok(Some(TrainSample { frames, s, t }))
}

/// Runs the T pair through the backbone up to the last insertion layer and
/// returns its template tokens at every insertion layer, tagged as dynamic.
/// The tokens are detached unless `cfg.end_to_end_dynamic` is set.
pub fn simulate_dynamic_tokens<'t>(
    bx: &Binder<'t>,
    model: &StmtModel,
    cfg: &Config,
    t: &Crops,
) -> Result<Vec<(usize, DynamicPair<'t>)>> {
    let Some(&last) = cfg.insert_layers.iter().max() else {
        return Ok(Vec::new());
    };
    let (z_v, z_t) = model.embed_pair(bx, cfg, &t.z_rgb, &t.z_tir, Role::Template)?;
    let (x_v, x_t) = model.embed_pair(bx, cfg, &t.x_rgb, &t.x_tir, Role::Search)?;
    let out = model.backbone(
        bx,
        cfg,
        &z_v,
        &z_t,
        &x_v,
        &x_t,
        Dynamic::Inactive,
        Some(Config::layer_index(last)),
    )?;
    Ok(out
        .preserved
        .iter()
        .map(|p| {
            let (v, t) = (as_dynamic(&p.z_v), as_dynamic(&p.z_t));
            let pair = if cfg.end_to_end_dynamic {
                (v, t)
            } else {
                (v.detach(), t.detach())
            };
            (p.layer_index + 1, pair)
        })
        .collect())
}

/// Gaussian score target centred on cell `(row, col)`, clamped into
/// `[1e-3, 1 - 1e-3]` so that it is reachable by finite logits.
pub fn gaussian_target(grid: Grid, row: usize, col: usize, sigma: f64) -> Vec<f64> {
    let mut t = Vec::with_capacity(grid.0 * grid.1);
    for r in 0..grid.0 {
        for c in 0..grid.1 {
            let d2 = (r as f64 - row as f64).powi(2) + (c as f64 - col as f64).powi(2);
            t.push((-d2 / (2.0 * sigma * sigma)).exp().clamp(1e-3, 1.0 - 1e-3));
        }
    }
    t
}

/// Regression targets at the ground-truth cell: `(cell index, offsets, sizes)`.
/// Offsets are in cells relative to the cell centre and sizes are fractions of
/// the search crop, matching [`crate::head::decode_box`].
pub fn regression_targets(gt: &BBox, cfg: &Config) -> Option<(usize, [f64; 2], [f64; 2])> {
    let grid = cfg.search_grid();
    let p = cfg.patch_size as f64;
    let (cx, cy) = gt.center();
    let (u, v) = (cx / p, cy / p);
    if !(u >= 0.0 && v >= 0.0 && u < grid.1 as f64 && v < grid.0 as f64) {
        return None;
    }
    let (col, row) = (u.floor() as usize, v.floor() as usize);
    let s = cfg.search_size as f64;
    Some((
        row * grid.1 + col,
        [u - (col as f64 + 0.5), v - (row as f64 + 0.5)],
        [gt.w / s, gt.h / s],
    ))
}

/// Weighted BCE of the score logits against a Gaussian target plus L1 on the
/// offset and size at the ground-truth cell. `None` when the ground-truth
/// centre lies outside the search crop.
pub fn compute_loss<'t>(logits: Var<'t>, offsets: Var<'t>, sizes: Var<'t>, gt: &BBox, cfg: &Config) -> Option<Var<'t>> {
    let grid = cfg.search_grid();
    let (cell, off, size) = regression_targets(gt, cfg)?;
    let target = gaussian_target(grid, cell / grid.1, cell % grid.1, cfg.target_sigma);
    let cls = logits.bce_with_logits(&target).scale(cfg.loss_cls_weight);
    let off = offsets.slice_rows(cell, 1).l1(&off).scale(cfg.loss_offset_weight);
    let size = sizes.slice_rows(cell, 1).l1(&size).scale(cfg.loss_size_weight);
    Some(cls.add(off).add(size))
}

/// Learning rate per parameter group: backbone (`embed.*`, `encoder.*`) at
/// `lr * backbone_lr_factor`, STMT at `lr`, head at `lr * head_lr_factor`,
/// all multiplied by `lr_decay` from `decay_step` on.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub lr: f64,
    pub backbone_factor: f64,
    pub head_factor: f64,
    pub decay: f64,
    pub decay_step: usize,
}

impl LrSchedule {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            lr: cfg.lr,
            backbone_factor: cfg.backbone_lr_factor,
            head_factor: cfg.head_lr_factor,
            decay: cfg.lr_decay,
            decay_step: (cfg.lr_decay_at * cfg.steps as f64).round() as usize,
        }
    }

    pub fn group_factor(&self, name: &str) -> f64 {
        if name.starts_with("embed.") || name.starts_with("encoder.") {
            self.backbone_factor
        } else if name.starts_with("head.") {
            self.head_factor
        } else {
            1.0
        }
    }

    /// Rate for parameter `name` at zero-based `step`.
    pub fn lr_for(&self, name: &str, step: usize) -> f64 {
        let decay = if step >= self.decay_step { self.decay } else { 1.0 };
        self.lr * self.group_factor(name) * decay
    }
}

/// Adam moments with decoupled weight decay applied to matrices only.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: usize,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<M: Parameterized>(model: &M, weight_decay: f64) -> Self {
        let mut sizes = Vec::new();
        model.visit("", &mut |_, t| sizes.push(t.len()));
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update with `grads` in visit order.
    pub fn update<M: Parameterized>(&mut self, model: &mut M, grads: &[Vec<f64>], sched: &LrSchedule) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::contract(format!(
                "{} gradient tensors for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        let step = self.step;
        let t = (step + 1) as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        let mut i = 0;
        let mut mismatch = None;
        model.visit_mut("", &mut |name, p| {
            let (g, m, v) = (&grads[i], &mut self.m[i], &mut self.v[i]);
            i += 1;
            if g.len() != p.len() || m.len() != p.len() {
                mismatch.get_or_insert_with(|| name.to_string());
                return;
            }
            let lr = sched.lr_for(name, step);
            let decay = if p.rank() >= 2 { lr * self.weight_decay } else { 0.0 };
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                let update = (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                *w -= lr * update + decay * *w;
            }
        });
        if let Some(name) = mismatch {
            return Err(Error::contract(format!("gradient shape mismatch at {name}")));
        }
        self.step += 1;
        Ok(())
    }
}

/// Loss and parameter gradients (visit order) for one sample; `None` when
/// the sample has no usable target.
pub fn sample_gradients(model: &StmtModel, cfg: &Config, sample: &TrainSample) -> Result<Option<(f64, Vec<Vec<f64>>)>> {
    let tape = Tape::new();
    let bx = Binder::new(&tape, true);
    let s = &sample.s;
    let (z_v, z_t) = model.embed_pair(&bx, cfg, &s.z_rgb, &s.z_tir, Role::Template)?;
    let (x_v, x_t) = model.embed_pair(&bx, cfg, &s.x_rgb, &s.x_tir, Role::Search)?;
    let simulated = if cfg.enable_dynamic_tokens && !cfg.tf_layers.is_empty() {
        simulate_dynamic_tokens(&bx, model, cfg, &sample.t)?
    } else {
        Vec::new()
    };
    let lookup = |l: usize| simulated.iter().find(|(k, _)| *k == l).map(|(_, p)| *p);
    let dynamic = if simulated.is_empty() {
        Dynamic::Inactive
    } else {
        Dynamic::Active(&lookup)
    };
    let out = model.forward(&bx, cfg, &z_v, &z_t, &x_v, &x_t, dynamic)?;
    let Some(loss) = compute_loss(out.head.logits, out.head.offsets, out.head.sizes, &s.gt, cfg) else {
        return Ok(None);
    };
    let value = loss.value().item();
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "training loss" });
    }
    let grads = tape.backward(loss)?;
    let mut out = Vec::new();
    model.visit("", &mut |_, t| out.push(bx.grad_of(&grads, t)));
    Ok(Some((value, out)))
}

/// Averages gradients over the usable samples of `batch` and applies one
/// optimizer step. Returns the mean loss, or `None` when no sample was usable.
pub fn train_step(
    model: &mut StmtModel,
    opt: &mut AdamW,
    sched: &LrSchedule,
    batch: &[TrainSample],
    cfg: &Config,
) -> Result<Option<f64>> {
    let mut total: Option<(f64, Vec<Vec<f64>>)> = None;
    let mut used = 0usize;
    for sample in batch {
        let Some((loss, grads)) = sample_gradients(model, cfg, sample)? else {
            continue;
        };
        used += 1;
        match &mut total {
            None => total = Some((loss, grads)),
            Some((l, acc)) => {
                *l += loss;
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.iter_mut().zip(g).for_each(|(a, g)| *a += g);
                }
            }
        }
    }
    let Some((loss, mut grads)) = total else {
        return Ok(None);
    };
    let scale = 1.0 / used as f64;
    grads.iter_mut().flatten().for_each(|g| *g *= scale);
    opt.update(model, &grads, sched)?;
    Ok(Some(loss * scale))
}

/// Draws a batch from sequences with at least four frames.
pub fn sample_batch<R: Rng>(data: &[Sequence], cfg: &Config, rng: &mut R) -> Result<Vec<TrainSample>> {
    let eligible: Vec<&Sequence> = data.iter().filter(|s| s.len() >= 4).collect();
    if eligible.is_empty() {
        return Err(Error::contract("no training sequence has at least four frames"));
    }
    let mut batch = Vec::with_capacity(cfg.batch_size);
    while batch.len() < cfg.batch_size {
        let seq = eligible[rng.gen_range(0..eligible.len())];
        if let Some(s) = sample_pairs(seq, cfg, rng)? {
            batch.push(s);
        }
    }
    Ok(batch)
}

/// One logged optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    /// Rate applied to the STMT group at this step.
    pub lr: f64,
}

pub fn loss_log_csv(records: &[StepRecord]) -> String {
    let mut s = String::from("step,loss,lr\n");
    for r in records {
        let _ = writeln!(s, "{},{:.8},{:e}", r.step, r.loss, r.lr);
    }
    s
}

pub fn checkpoint_name(step: usize) -> String {
    format!("checkpoint_{step:06}.bin")
}

/// Trains for `cfg.steps` steps. With `out_dir`, writes a checkpoint every
/// `cfg.checkpoint_every` steps, `model.bin` at the end, and `loss.csv`.
pub fn train(
    model: &mut StmtModel,
    cfg: &Config,
    data: &[Sequence],
    out_dir: Option<&Path>,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00_0000);
    let sched = LrSchedule::from_config(cfg);
    let mut opt = AdamW::new(model, cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.steps);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    for step in 0..cfg.steps {
        let batch = sample_batch(data, cfg, &mut rng)?;
        let lr = sched.lr_for("stmt", step);
        if let Some(loss) = train_step(model, &mut opt, &sched, &batch, cfg)? {
            let rec = StepRecord { step: step + 1, loss, lr };
            on_step(&rec);
            log.push(rec);
        }
        if let Some(dir) = out_dir {
            let done = step + 1;
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                save_params(&dir.join(checkpoint_name(done)), model)?;
                write_atomic(&dir.join("loss.csv"), loss_log_csv(&log).as_bytes())?;
            }
        }
    }
    if let Some(dir) = out_dir {
        save_params(&dir.join("model.bin"), model)?;
        write_atomic(&dir.join("loss.csv"), loss_log_csv(&log).as_bytes())?;
    }
    Ok(log)
}

/// Gradient norm per parameter, keyed by name, for one sample.
pub fn gradient_norms(model: &StmtModel, cfg: &Config, sample: &TrainSample) -> Result<Vec<(String, f64)>> {
    let (_, grads) = sample_gradients(model, cfg, sample)?
        .ok_or_else(|| Error::contract("sample has no usable target"))?;
    let mut names = Vec::new();
    model.visit("", &mut |n, _: &Tensor| names.push(n.to_string()));
    Ok(names
        .into_iter()
        .zip(grads)
        .map(|(n, g)| (n, g.iter().map(|x| x * x).sum::<f64>().sqrt()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::{head_forward, HeadParams};
    use crate::image::Modality;
    use crate::io::synth::{render, SynthSpec};
    use crate::embedding::TokenSeq;
    use crate::tensor::{grad_check, GradCheckOptions};

    fn toy_cfg() -> Config {
        Config {
            template_size: 16,
            search_size: 32,
            ..Config::tiny()
        }
    }

    fn toy_sequence(seed: u64, length: usize) -> Sequence {
        let spec = SynthSpec {
            length,
            width: 48,
            height: 48,
            target_min: 8.0,
            target_max: 12.0,
            distractors: 1,
            occlusions: 0,
            ..SynthSpec::default()
        };
        render(&spec, seed).unwrap().sequence
    }

    #[test]
    fn four_frames_are_all_used() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let mut f = choose_frames(4, &mut rng).unwrap().as_array();
            f.sort();
            assert_eq!(f, [0, 1, 2, 3]);
        }
        assert_eq!(choose_frames(3, &mut rng), None);
    }

    #[test]
    fn sampling_is_seeded() {
        let seq = toy_sequence(2, 8);
        let cfg = toy_cfg();
        let a = sample_pairs(&seq, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap().unwrap();
        let b = sample_pairs(&seq, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap().unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.s.x_rgb, b.s.x_rgb);
        assert_eq!(a.t.z_tir, b.t.z_tir);
        let f = a.frames.as_array();
        assert!((0..4).all(|i| (i + 1..4).all(|j| f[i] != f[j])));
        assert!(sample_pairs(&toy_sequence(2, 3), &cfg, &mut ChaCha8Rng::seed_from_u64(5))
            .unwrap()
            .is_none());
    }

    #[test]
    fn template_frame_is_uniform() {
        // Each count is Binomial(10000, 0.1): mean 1000, sigma 30.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut counts = [0usize; 10];
        for _ in 0..10_000 {
            counts[choose_frames(10, &mut rng).unwrap().s_template] += 1;
        }
        for c in counts {
            assert!((c as f64 - 1000.0).abs() <= 90.0, "{counts:?}");
        }
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - 1000.0).powi(2) / 1000.0).sum();
        // 99.9th percentile of chi-square with 9 degrees of freedom.
        assert!(chi2 < 27.88, "chi2 = {chi2}");
    }

    #[test]
    fn simulated_tokens_have_template_shape() {
        let cfg = toy_cfg();
        let model = StmtModel::new(&cfg).unwrap();
        let seq = toy_sequence(4, 6);
        let sample = sample_pairs(&seq, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap().unwrap();
        let tape = Tape::new();
        let bx = Binder::new(&tape, false);
        let sim = simulate_dynamic_tokens(&bx, &model, &cfg, &sample.t).unwrap();
        assert_eq!(sim.iter().map(|(l, _)| *l).collect::<Vec<_>>(), cfg.insert_layers);
        for (_, (v, t)) in &sim {
            assert_eq!((v.tokens.rows(), t.tokens.rows()), (cfg.n_template(), cfg.n_template()));
            assert_eq!((v.role, v.modality, t.modality), (Role::Dynamic, Modality::Rgb, Modality::Tir));
            assert!(!v.tokens.requires_grad());
        }
        let again = simulate_dynamic_tokens(&bx, &model, &cfg, &sample.t).unwrap();
        assert_eq!(*again[0].1 .0.tokens.value(), *sim[0].1 .0.tokens.value());

        let empty = Config {
            insert_layers: vec![],
            tf_layers: vec![],
            ..cfg
        };
        let m0 = StmtModel::new(&empty).unwrap();
        assert!(simulate_dynamic_tokens(&bx, &m0, &empty, &sample.t).unwrap().is_empty());
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let cfg = Config {
            loss_offset_weight: 0.0,
            loss_size_weight: 0.0,
            ..toy_cfg()
        };
        let n = cfg.n_search();
        let tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[n, 1]));
        let o = tape.constant(Tensor::zeros(&[n, 2]));
        let s = tape.constant(Tensor::full(&[n, 2], 0.5));
        let loss = compute_loss(l, o, s, &BBox::new(10.0, 12.0, 6.0, 6.0), &cfg).unwrap();
        assert!((loss.value().item() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(compute_loss(l, o, s, &BBox::new(40.0, 12.0, 6.0, 6.0), &cfg).is_none());
    }

    #[test]
    fn perfect_prediction_is_a_minimum() {
        let cfg = toy_cfg();
        let n = cfg.n_search();
        let gt = BBox::new(9.0, 13.0, 7.0, 5.0);
        let (cell, off, size) = regression_targets(&gt, &cfg).unwrap();
        let target = gaussian_target(cfg.search_grid(), cell / 4, cell % 4, cfg.target_sigma);
        let logits: Vec<f64> = target.iter().map(|t| (t / (1.0 - t)).ln()).collect();
        let mut offsets = vec![0.1; 2 * n];
        offsets[2 * cell..2 * cell + 2].copy_from_slice(&off);
        let mut sizes = vec![0.3; 2 * n];
        sizes[2 * cell..2 * cell + 2].copy_from_slice(&size);
        let eval = |l: &[f64], o: &[f64], s: &[f64]| {
            let tape = Tape::new();
            let v = |d: &[f64], c| tape.constant(Tensor::new(&[n, c], d.to_vec()).unwrap());
            compute_loss(v(l, 1), v(o, 2), v(s, 2), &gt, &cfg).unwrap().value().item()
        };
        let best = eval(&logits, &offsets, &sizes);
        for k in 0..n {
            for d in [-0.5, -0.05, 0.05, 0.5] {
                let mut l = logits.clone();
                l[k] += d;
                assert!(eval(&l, &offsets, &sizes) >= best);
                let mut o = offsets.clone();
                o[2 * k] += d;
                assert!(eval(&logits, &o, &sizes) >= best);
                let mut s = sizes.clone();
                s[2 * k + 1] += d;
                assert!(eval(&logits, &offsets, &s) >= best);
            }
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let cfg = toy_cfg();
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let mut head = HeadParams::init(&cfg, &mut r);
        let xv = Tensor::uniform(&[cfg.n_search(), cfg.embed_dim], 1.0, &mut r);
        let xt = Tensor::uniform(&[cfg.n_search(), cfg.embed_dim], 1.0, &mut r);
        let gt = BBox::new(9.3, 13.1, 7.0, 5.0);
        let rep = grad_check(
            &mut head,
            |h, bx| {
                let seq = |t: &Tensor, m| TokenSeq {
                    tokens: bx.constant(t.clone()),
                    role: Role::Search,
                    modality: m,
                    grid: cfg.search_grid(),
                };
                let out = head_forward(bx, &seq(&xv, Modality::Rgb), &seq(&xt, Modality::Tir), h, &cfg)?;
                compute_loss(out.logits, out.offsets, out.sizes, &gt, &cfg).ok_or_else(|| Error::contract("gt"))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.max_rel_err <= 1e-4, "{rep:?}");
    }

    #[test]
    fn lr_groups_and_decay() {
        let cfg = Config {
            steps: 30,
            ..Config::default()
        };
        let s = LrSchedule::from_config(&cfg);
        let stmt = s.lr_for("stmt.layer4.tf.attn.q.weight", 0);
        assert_eq!(stmt, 1e-4);
        assert!((s.lr_for("encoder.layer0.mlp.fc1.weight", 0) / stmt - 1e-2).abs() < 1e-15);
        assert!((s.lr_for("embed.patch_proj.weight", 0) / stmt - 1e-2).abs() < 1e-15);
        assert!((s.lr_for("head.score.fc1.weight", 0) / stmt - 1e-1).abs() < 1e-15);
        assert_eq!(s.decay_step, 10);
        assert!((s.lr_for("stmt.x", 10) - 1e-5).abs() < 1e-20);
        assert_eq!(s.lr_for("stmt.x", 9), 1e-4);
    }

    fn param_bytes(m: &StmtModel) -> Vec<u8> {
        crate::tensor::checkpoint::encode(&crate::tensor::checkpoint::collect_params(m))
    }

    fn toy_batch(cfg: &Config, seed: u64) -> Vec<TrainSample> {
        let data = vec![toy_sequence(7, 8), toy_sequence(8, 8)];
        sample_batch(&data, cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn steps_are_deterministic_and_zero_lr_is_inert() {
        let cfg = Config {
            batch_size: 2,
            ..toy_cfg()
        };
        let batch = toy_batch(&cfg, 1);
        let run = |cfg: &Config| {
            let mut m = StmtModel::new(cfg).unwrap();
            let mut opt = AdamW::new(&m, cfg.weight_decay);
            let sched = LrSchedule::from_config(cfg);
            for _ in 0..2 {
                train_step(&mut m, &mut opt, &sched, &batch, cfg).unwrap().unwrap();
            }
            m
        };
        let a = run(&cfg);
        assert_eq!(param_bytes(&a), param_bytes(&run(&cfg)));
        assert_ne!(param_bytes(&a), param_bytes(&StmtModel::new(&cfg).unwrap()));

        let frozen = Config { lr: 0.0, ..cfg.clone() };
        assert_eq!(param_bytes(&run(&frozen)), param_bytes(&StmtModel::new(&frozen).unwrap()));
    }

    #[test]
    fn loss_decreases_on_a_fixed_batch() {
        let cfg = Config {
            batch_size: 2,
            steps: 50,
            lr_decay_at: 1.0,
            ..toy_cfg()
        };
        let batch = toy_batch(&cfg, 2);
        let mut m = StmtModel::new(&cfg).unwrap();
        let mut opt = AdamW::new(&m, cfg.weight_decay);
        let sched = LrSchedule::from_config(&cfg);
        let losses: Vec<f64> = (0..50)
            .map(|_| train_step(&mut m, &mut opt, &sched, &batch, &cfg).unwrap().unwrap())
            .collect();
        assert!(losses[49] < losses[0], "{} -> {}", losses[0], losses[49]);
        let head: f64 = losses[..10].iter().sum();
        let tail: f64 = losses[40..].iter().sum();
        assert!(tail < head);
    }

    #[test]
    fn every_stmt_group_receives_gradient() {
        let check = |model: &StmtModel, cfg: &Config, sample: &TrainSample| {
            let norms = gradient_norms(model, cfg, sample).unwrap();
            let groups = ["stmt.layer1.ca_template", "stmt.layer2.ca_template", "stmt.layer2.ca_dynamic", "stmt.layer2.tf"];
            for g in groups {
                let total: f64 = norms.iter().filter(|(n, _)| n.starts_with(g)).map(|(_, v)| v * v).sum();
                assert!(total > 0.0, "{g} has no gradient");
            }
            for prefix in ["embed.", "encoder.", "head."] {
                assert!(norms.iter().any(|(n, v)| n.starts_with(prefix) && *v > 0.0));
            }
        };
        let random = Config {
            stmt_zero_init: false,
            ..toy_cfg()
        };
        let sample = toy_batch(&Config { batch_size: 1, ..random.clone() }, 3).remove(0);
        check(&StmtModel::new(&random).unwrap(), &random, &sample);

        // Zero-initialized output projections open the other groups after one update.
        let cfg = toy_cfg();
        let mut model = StmtModel::new(&cfg).unwrap();
        let mut opt = AdamW::new(&model, cfg.weight_decay);
        let sched = LrSchedule::from_config(&cfg);
        train_step(&mut model, &mut opt, &sched, &toy_batch(&cfg, 4), &cfg).unwrap();
        check(&model, &cfg, &sample);
    }

    #[test]
    fn train_writes_checkpoints_and_log() {
        let cfg = Config {
            batch_size: 1,
            steps: 4,
            checkpoint_every: 2,
            ..toy_cfg()
        };
        let data = vec![toy_sequence(11, 6)];
        let dir = tempfile::tempdir().unwrap();
        let mut model = StmtModel::new(&cfg).unwrap();
        let mut seen = 0;
        let log = train(&mut model, &cfg, &data, Some(dir.path()), &mut |_| seen += 1).unwrap();
        assert_eq!((log.len(), seen), (4, 4));
        for f in ["checkpoint_000002.bin", "checkpoint_000004.bin", "model.bin", "loss.csv"] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        let text = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
        assert_eq!(text.lines().count(), 5);
        let mut reloaded = StmtModel::new(&cfg).unwrap();
        crate::tensor::checkpoint::load_params(&dir.path().join("model.bin"), &mut reloaded).unwrap();
        assert_eq!(reloaded, model);
    }
}
