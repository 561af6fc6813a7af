//! Frame-by-frame inference: fixed templates, gated dynamic-token cache.

use crate::config::Config;
use crate::embedding::{Role, TokenSeq};
use crate::error::{Error, Result};
use crate::geometry::{crop_window, BBox};
use crate::head::decode_output;
use crate::image::Frame;
use crate::memory::{extract_dynamic_tokens, init_cache, maybe_update, DynamicTokenCache, UpdatePolicy};
use crate::model::StmtModel;
use crate::stmt::{Dynamic, DynamicPair};
use crate::tensor::{Binder, Tape};

/// Everything the tracker carries between frames.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackerState {
    /// Embedded first-frame templates; never modified after initialisation.
    pub template_v: TokenSeq,
    pub template_t: TokenSeq,
    pub cache: DynamicTokenCache,
    pub prev_box: BBox,
    /// Index of the last processed frame; the initial frame is 0.
    pub frame: usize,
    pub search_factor: f64,
    pub image_size: (usize, usize),
}

impl TrackerState {
    /// Raw bytes of both template token tensors.
    pub fn template_bytes(&self) -> Vec<u8> {
        [self.template_v.tokens.to_le_bytes(), self.template_t.tokens.to_le_bytes()].concat()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutput {
    pub bbox: BBox,
    pub score: f64,
    /// Whether the dynamic-token cache was replaced at this frame.
    pub updated: bool,
}

pub struct Tracker<'m> {
    pub model: &'m StmtModel,
    pub cfg: Config,
    pub policy: UpdatePolicy,
}

impl<'m> Tracker<'m> {
    pub fn new(model: &'m StmtModel, cfg: &Config) -> Self {
        Self {
            model,
            cfg: cfg.clone(),
            policy: UpdatePolicy::from_config(cfg),
        }
    }

    /// Builds the templates and seeds the cache from the ground-truth box.
    pub fn init(&self, rgb: &Frame, tir: &Frame, gt: &BBox) -> Result<TrackerState> {
        let cfg = &self.cfg;
        check_frames(rgb, tir)?;
        let (w, h) = (rgb.width as f64, rgb.height as f64);
        if gt.is_degenerate() || gt.x >= w || gt.y >= h || gt.x + gt.w <= 0.0 || gt.y + gt.h <= 0.0 {
            return Err(Error::contract(format!("initial box {gt:?} is outside the {w}x{h} image")));
        }
        let tape = Tape::new();
        let bx = Binder::new(&tape, false);
        let z = crop_window(rgb, tir, gt, None, cfg.template_factor, cfg.template_size)?;
        let (z_v, z_t) = self.model.embed_pair(&bx, cfg, &z.rgb, &z.tir, Role::Template)?;
        let x = crop_window(rgb, tir, gt, None, cfg.search_factor, cfg.search_size)?;
        let (x_v, x_t) = self.model.embed_pair(&bx, cfg, &x.rgb, &x.tir, Role::Search)?;
        let out = self.model.forward(&bx, cfg, &z_v, &z_t, &x_v, &x_t, Dynamic::Inactive)?;
        tape.check_finite()?;
        let cache = init_cache(&out.preserved_tokens(), &x.window.image_to_crop(gt), cfg)?;
        Ok(TrackerState {
            template_v: z_v.to_tensor_seq(),
            template_t: z_t.to_tensor_seq(),
            cache,
            prev_box: *gt,
            frame: 0,
            search_factor: cfg.search_factor,
            image_size: (rgb.width, rgb.height),
        })
    }

    /// Localizes the target in the next frame pair.
    pub fn step(&self, state: &mut TrackerState, rgb: &Frame, tir: &Frame) -> Result<StepOutput> {
        let cfg = &self.cfg;
        check_frames(rgb, tir)?;
        let frame = state.frame + 1;
        let tape = Tape::new();
        let bx = Binder::new(&tape, false);
        let x = crop_window(rgb, tir, &state.prev_box, Some(&state.prev_box), state.search_factor, cfg.search_size)?;
        let (x_v, x_t) = self.model.embed_pair(&bx, cfg, &x.rgb, &x.tir, Role::Search)?;
        let (z_v, z_t) = (state.template_v.lift(&bx), state.template_t.lift(&bx));
        let lifted: Vec<(usize, DynamicPair<'_>)> = state
            .cache
            .entries
            .iter()
            .map(|(&l, (m_v, m_t))| (l, (m_v.lift(&bx), m_t.lift(&bx))))
            .collect();
        let lookup = |l: usize| lifted.iter().find(|(k, _)| *k == l).map(|(_, p)| *p);
        let out = self.model.forward(&bx, cfg, &z_v, &z_t, &x_v, &x_t, Dynamic::Active(&lookup))?;
        tape.check_finite()?;

        let (crop_box, score) = decode_output(&out.head, cfg);
        let (w, h) = (rgb.width as f64, rgb.height as f64);
        let bbox = x.window.crop_to_image(&crop_box).clamp_to(w, h, 1.0);

        let mut updated = false;
        if self.policy.is_open(state.cache.last_update_frame, frame, score) {
            let staged = extract_dynamic_tokens(&out.preserved_tokens(), &crop_box, cfg)?;
            updated = maybe_update(&mut state.cache, staged, frame, score, &self.policy, cfg)?;
        }
        state.prev_box = bbox;
        state.frame = frame;
        Ok(StepOutput { bbox, score, updated })
    }
}

fn check_frames(rgb: &Frame, tir: &Frame) -> Result<()> {
    if rgb.channels != 3 || tir.channels != 1 {
        return Err(Error::contract("expected a 3-channel visible frame and a 1-channel infrared frame"));
    }
    if (rgb.width, rgb.height) != (tir.width, tir.height) {
        return Err(Error::contract(format!(
            "visible frame is {}x{}, infrared is {}x{}",
            rgb.width, rgb.height, tir.width, tir.height
        )));
    }
    if rgb.width == 0 || rgb.height == 0 {
        return Err(Error::contract("empty frame"));
    }
    Ok(())
}

/// Runs one-pass tracking: initialise on the first frame pair with `init_box`,
/// then predict every following frame. The first returned box is `init_box`.
pub fn track_frames<I>(model: &StmtModel, cfg: &Config, init_box: &BBox, frames: I) -> Result<Vec<BBox>>
where
    I: IntoIterator<Item = Result<(Frame, Frame)>>,
{
    let tracker = Tracker::new(model, cfg);
    let mut it = frames.into_iter();
    let (rgb, tir) = it.next().ok_or_else(|| Error::contract("sequence has no frames"))??;
    let mut state = tracker.init(&rgb, &tir, init_box)?;
    let mut boxes = vec![*init_box];
    for pair in it {
        let (rgb, tir) = pair?;
        boxes.push(tracker.step(&mut state, &rgb, &tir)?.bbox);
    }
    Ok(boxes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(size: usize, bx: usize, by: usize, s: usize) -> (Frame, Frame) {
        let mut rgb = Frame::filled(size, size, 3, 20);
        let mut tir = Frame::filled(size, size, 1, 10);
        for y in by..by + s {
            for x in bx..bx + s {
                rgb.set(x, y, 0, 220);
                rgb.set(x, y, 1, 60);
                tir.set(x, y, 0, 240);
            }
        }
        (rgb, tir)
    }

    fn small_cfg() -> Config {
        let mut cfg = Config::tiny();
        cfg.update_interval = 1;
        cfg.score_threshold = 0.0;
        cfg
    }

    #[test]
    fn init_builds_template_and_cache() {
        let cfg = small_cfg();
        let model = StmtModel::new(&cfg).unwrap();
        let (rgb, tir) = scene(64, 20, 20, 8);
        let gt = BBox::new(20.0, 20.0, 8.0, 8.0);
        let tracker = Tracker::new(&model, &cfg);
        let a = tracker.init(&rgb, &tir, &gt).unwrap();
        assert_eq!(a.frame, 0);
        assert_eq!(a.template_v.len(), cfg.n_template());
        assert_eq!(a.cache.entries.len(), cfg.insert_layers.len());
        for (v, t) in a.cache.entries.values() {
            assert_eq!((v.len(), t.len()), (cfg.n_template(), cfg.n_template()));
        }
        assert_eq!(a, tracker.init(&rgb, &tir, &gt).unwrap());
        assert!(tracker.init(&rgb, &tir, &BBox::new(70.0, 5.0, 4.0, 4.0)).is_err());
    }

    #[test]
    fn template_fixed_and_cache_follows_gate() {
        let mut cfg = small_cfg();
        cfg.update_interval = 2;
        let model = StmtModel::new(&cfg).unwrap();
        let tracker = Tracker::new(&model, &cfg);
        let (rgb, tir) = scene(64, 20, 20, 8);
        let mut state = tracker.init(&rgb, &tir, &BBox::new(20.0, 20.0, 8.0, 8.0)).unwrap();
        let template = state.template_bytes();
        let mut updates = 0;
        for i in 0..6 {
            let (rgb, tir) = scene(64, 20 + i, 21, 8);
            let before = state.cache.to_bytes();
            let out = tracker.step(&mut state, &rgb, &tir).unwrap();
            assert_eq!(state.template_bytes(), template);
            assert_eq!(state.cache.to_bytes() != before, out.updated);
            updates += out.updated as usize;
            let b = out.bbox;
            assert!(b.w >= 1.0 && b.h >= 1.0 && b.x >= 0.0 && b.y >= 0.0 && b.x + b.w <= 64.0 && b.y + b.h <= 64.0);
        }
        assert_eq!(updates, 3);
    }

    #[test]
    fn closed_gate_repeats_predictions() {
        let mut cfg = small_cfg();
        cfg.score_threshold = 1.0;
        let model = StmtModel::new(&cfg).unwrap();
        let tracker = Tracker::new(&model, &cfg);
        let (rgb, tir) = scene(64, 20, 20, 8);
        let mut state = tracker.init(&rgb, &tir, &BBox::new(20.0, 20.0, 8.0, 8.0)).unwrap();
        let mut twin = state.clone();
        let cache = state.cache.to_bytes();
        let a = tracker.step(&mut state, &rgb, &tir).unwrap();
        let b = tracker.step(&mut twin, &rgb, &tir).unwrap();
        assert_eq!(a, b);
        assert!(!a.updated);
        assert_eq!(state.cache.to_bytes(), cache);
    }
}
