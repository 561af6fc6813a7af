//! Procedural RGB-thermal sequences with exact ground truth.
//!
//! The target is a filled superellipse inscribed in its integer-aligned box.
//! In the visible channel it has a hue-drifting two-tone pattern and is
//! subject to global illumination swings and look-alike distractors. In the
//! thermal channel it is a warm blob whose intensity drifts slowly while the
//! distractors stay cold. Occluders are drawn on top of the target in both
//! channels and never move the ground truth.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::kv_lines;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::Frame;
use crate::io::sequence::{Sequence, SequenceDir};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub length: usize,
    pub width: usize,
    pub height: usize,
    /// Range of the initial target side lengths, pixels.
    pub target_min: f64,
    pub target_max: f64,
    /// Per-frame standard deviation of the velocity random walk, pixels.
    pub walk_std: f64,
    /// Magnitude of the constant drift velocity; its direction is drawn per sequence.
    pub drift: f64,
    /// Per-frame standard deviation of the log-size random walk.
    pub scale_walk: f64,
    /// Hue change of the visible target, degrees per frame.
    pub hue_drift: f64,
    /// Change of the superellipse exponent per frame.
    pub shape_drift: f64,
    /// Thermal intensity change per frame, grey levels.
    pub tir_drift: f64,
    /// Relative amplitude of the visible-only illumination swing.
    pub illumination: f64,
    pub illumination_period: f64,
    pub distractors: usize,
    pub occlusions: usize,
    pub occlusion_length: usize,
    /// Fraction of the target width hidden during an occlusion.
    pub occlusion_cover: f64,
    /// Amplitude of per-pixel sensor noise, grey levels.
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            length: 60,
            width: 128,
            height: 128,
            target_min: 14.0,
            target_max: 26.0,
            walk_std: 0.6,
            drift: 0.8,
            scale_walk: 0.01,
            hue_drift: 2.5,
            shape_drift: 0.04,
            tir_drift: -1.0,
            illumination: 0.35,
            illumination_period: 40.0,
            distractors: 2,
            occlusions: 1,
            occlusion_length: 6,
            occlusion_cover: 0.5,
            noise: 6.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.length == 0 || self.width == 0 || self.height == 0 {
            return bad("length, width and height must be positive".into());
        }
        if !(self.target_min >= 2.0 && self.target_min <= self.target_max) {
            return bad(format!(
                "target size range [{}, {}] is invalid",
                self.target_min, self.target_max
            ));
        }
        if self.target_max > self.width.min(self.height) as f64 {
            return bad(format!(
                "target size {} does not fit a {}x{} image",
                self.target_max, self.width, self.height
            ));
        }
        if !(0.0..=1.0).contains(&self.occlusion_cover) {
            return bad("occlusion_cover must be in [0, 1]".into());
        }
        if self.illumination_period <= 0.0 || !(0.0..1.0).contains(&self.illumination) {
            return bad("illumination must be in [0, 1) with a positive period".into());
        }
        let non_negative = [
            self.walk_std,
            self.drift,
            self.scale_walk,
            self.shape_drift,
            self.noise,
        ];
        if non_negative.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("motion, drift and noise parameters must be finite and non-negative".into());
        }
        Ok(())
    }

    /// Motion-free, appearance-stable variant of `self`.
    pub fn still(&self) -> Self {
        Self {
            walk_std: 0.0,
            drift: 0.0,
            scale_walk: 0.0,
            ..self.clone()
        }
    }

    pub fn to_text(&self) -> String {
        format!(
            "length = {}\nwidth = {}\nheight = {}\ntarget_min = {}\ntarget_max = {}\nwalk_std = {}\n\
             drift = {}\nscale_walk = {}\nhue_drift = {}\nshape_drift = {}\ntir_drift = {}\n\
             illumination = {}\nillumination_period = {}\ndistractors = {}\nocclusions = {}\n\
             occlusion_length = {}\nocclusion_cover = {}\nnoise = {}\n",
            self.length,
            self.width,
            self.height,
            self.target_min,
            self.target_max,
            self.walk_std,
            self.drift,
            self.scale_walk,
            self.hue_drift,
            self.shape_drift,
            self.tir_drift,
            self.illumination,
            self.illumination_period,
            self.distractors,
            self.occlusions,
            self.occlusion_length,
            self.occlusion_cover,
            self.noise,
        )
    }

    /// Flat `key = value` text; missing keys keep their defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut s = Self::default();
        for (line, key, value) in kv_lines(text)? {
            s.set(key, value).map_err(|detail| Error::Line { line, detail })?;
        }
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_text(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
        }
        match key {
            "length" => self.length = num(key, value)?,
            "width" => self.width = num(key, value)?,
            "height" => self.height = num(key, value)?,
            "target_min" => self.target_min = num(key, value)?,
            "target_max" => self.target_max = num(key, value)?,
            "walk_std" => self.walk_std = num(key, value)?,
            "drift" => self.drift = num(key, value)?,
            "scale_walk" => self.scale_walk = num(key, value)?,
            "hue_drift" => self.hue_drift = num(key, value)?,
            "shape_drift" => self.shape_drift = num(key, value)?,
            "tir_drift" => self.tir_drift = num(key, value)?,
            "illumination" => self.illumination = num(key, value)?,
            "illumination_period" => self.illumination_period = num(key, value)?,
            "distractors" => self.distractors = num(key, value)?,
            "occlusions" => self.occlusions = num(key, value)?,
            "occlusion_length" => self.occlusion_length = num(key, value)?,
            "occlusion_cover" => self.occlusion_cover = num(key, value)?,
            "noise" => self.noise = num(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }
}

/// A rendered sequence with per-frame rendering facts used by tests.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSequence {
    pub sequence: Sequence,
    /// Whether an occluder overlapped the target in that frame.
    pub occluded: Vec<bool>,
    /// Visible target pixels per frame, row-major `width * height` masks.
    pub target_masks: Vec<Vec<bool>>,
}

/// Moving state of one superellipse blob; the box is in continuous pixels.
#[derive(Clone, Debug)]
struct Blob {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    vx: f64,
    vy: f64,
}

impl Blob {
    fn spawn(spec: &SynthSpec, rng: &mut ChaCha8Rng, speed: f64) -> Self {
        let w = rng.gen_range(spec.target_min..=spec.target_max);
        let h = (w * rng.gen_range(0.7..1.4)).clamp(spec.target_min, spec.target_max);
        let (iw, ih) = (spec.width as f64, spec.height as f64);
        let cx = rng.gen_range(w / 2.0..=iw - w / 2.0);
        let cy = rng.gen_range(h / 2.0..=ih - h / 2.0);
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        Self {
            cx,
            cy,
            w,
            h,
            vx: speed * angle.cos(),
            vy: speed * angle.sin(),
        }
    }

    /// Advances one frame, reflecting off the image border.
    fn advance(&mut self, spec: &SynthSpec, walk: f64, scale_walk: f64, rng: &mut ChaCha8Rng) {
        if walk > 0.0 {
            let n = Normal::new(0.0, walk).expect("finite walk std");
            self.vx += n.sample(rng);
            self.vy += n.sample(rng);
            // Keep the speed bounded so targets stay trackable.
            let cap = 3.0 * (spec.drift + walk);
            let speed = self.vx.hypot(self.vy);
            if speed > cap {
                self.vx *= cap / speed;
                self.vy *= cap / speed;
            }
        }
        if scale_walk > 0.0 {
            let n = Normal::new(0.0, scale_walk).expect("finite scale std");
            let s = n.sample(rng).exp();
            self.w = (self.w * s).clamp(spec.target_min, spec.target_max);
            self.h = (self.h * s).clamp(spec.target_min, spec.target_max);
        }
        self.cx += self.vx;
        self.cy += self.vy;
        let (iw, ih) = (spec.width as f64, spec.height as f64);
        reflect(&mut self.cx, &mut self.vx, self.w / 2.0, iw - self.w / 2.0);
        reflect(&mut self.cy, &mut self.vy, self.h / 2.0, ih - self.h / 2.0);
    }

    /// Integer-aligned box that the blob is rendered into.
    fn pixel_box(&self, spec: &SynthSpec) -> BBox {
        let w = self.w.round().max(2.0).min(spec.width as f64);
        let h = self.h.round().max(2.0).min(spec.height as f64);
        let x = (self.cx - w / 2.0).round().clamp(0.0, spec.width as f64 - w);
        let y = (self.cy - h / 2.0).round().clamp(0.0, spec.height as f64 - h);
        BBox::new(x, y, w, h)
    }
}

fn reflect(pos: &mut f64, vel: &mut f64, lo: f64, hi: f64) {
    if *pos < lo {
        *pos = 2.0 * lo - *pos;
        *vel = vel.abs();
    }
    if *pos > hi {
        *pos = 2.0 * hi - *pos;
        *vel = -vel.abs();
    }
    *pos = pos.clamp(lo, hi);
}

/// Normalized superellipse radius of pixel `(px, py)` within `b`; at most 1 inside.
fn shape_radius(b: &BBox, px: usize, py: usize, exponent: f64) -> f64 {
    let (cx, cy) = b.center();
    let dx = ((px as f64 + 0.5 - cx) / (b.w / 2.0)).abs();
    let dy = ((py as f64 + 0.5 - cy) / (b.h / 2.0)).abs();
    (dx.powf(exponent) + dy.powf(exponent)).powf(1.0 / exponent)
}

/// Pixel range covered by a box, clipped to the image.
fn pixel_span(b: &BBox, spec: &SynthSpec) -> (usize, usize, usize, usize) {
    let x0 = b.x.max(0.0).floor() as usize;
    let y0 = b.y.max(0.0).floor() as usize;
    let x1 = ((b.x + b.w).ceil().max(0.0) as usize).min(spec.width);
    let y1 = ((b.y + b.h).ceil().max(0.0) as usize).min(spec.height);
    (x0, y0, x1, y1)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Renders a sequence in memory. Identical `(spec, seed)` give identical output.
pub fn render(spec: &SynthSpec, seed: u64) -> Result<SynthSequence> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (spec.width, spec.height);

    // Static background textures.
    let freq: Vec<f64> = (0..6).map(|_| rng.gen_range(0.02..0.12)).collect();
    let phase: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    let base: [f64; 3] = [rng.gen_range(60.0..120.0), rng.gen_range(60.0..120.0), rng.gen_range(60.0..120.0)];
    let mut bg_rgb = vec![0.0; w * h * 3];
    let mut bg_tir = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            for c in 0..3 {
                let wave = (freq[c] * xf + freq[c + 3] * yf + phase[c]).sin();
                bg_rgb[(y * w + x) * 3 + c] = base[c] + 35.0 * wave;
            }
            bg_tir[y * w + x] = 45.0 + 15.0 * (freq[0] * yf - freq[4] * xf + phase[3]).sin();
        }
    }

    let mut target = Blob::spawn(spec, &mut rng, spec.drift);
    let hue0 = rng.gen_range(0.0..360.0);
    let exponent0 = rng.gen_range(2.0..3.0);
    let heat0 = rng.gen_range(200.0..240.0);
    let illum_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut distractors: Vec<(Blob, f64)> = (0..spec.distractors)
        .map(|_| {
            let hue = hue0 + rng.gen_range(-20.0..20.0);
            (Blob::spawn(spec, &mut rng, 1.0), hue)
        })
        .collect();
    let occlusion_starts: Vec<usize> = (0..spec.occlusions)
        .map(|_| rng.gen_range(1..spec.length.max(2)))
        .collect();
    let occlusion_from_left: Vec<bool> = (0..spec.occlusions).map(|_| rng.gen()).collect();
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("finite noise");

    let mut frames = Vec::with_capacity(spec.length);
    let mut groundtruth = Vec::with_capacity(spec.length);
    let mut occluded = Vec::with_capacity(spec.length);
    let mut target_masks = Vec::with_capacity(spec.length);
    for t in 0..spec.length {
        if t > 0 {
            target.advance(spec, spec.walk_std, spec.scale_walk, &mut rng);
            for (d, _) in distractors.iter_mut() {
                d.advance(spec, 0.5, 0.0, &mut rng);
            }
        }
        let tf = t as f64;
        let illum = 1.0 + spec.illumination * (std::f64::consts::TAU * tf / spec.illumination_period + illum_phase).sin();
        let mut rgb: Vec<f64> = bg_rgb.clone();
        let mut tir: Vec<f64> = bg_tir.clone();

        // Distractors: visible look-alikes that are cold in the thermal channel.
        for (d, hue) in &distractors {
            let b = d.pixel_box(spec);
            let color = hsv_to_rgb(*hue, 0.8, 0.9);
            let (x0, y0, x1, y1) = pixel_span(&b, spec);
            for y in y0..y1 {
                for x in x0..x1 {
                    if shape_radius(&b, x, y, 2.5) <= 1.0 {
                        rgb[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&color);
                        tir[y * w + x] = 70.0;
                    }
                }
            }
        }

        // Target.
        let gt = target.pixel_box(spec);
        let exponent = (exponent0 + spec.shape_drift * tf).clamp(1.2, 8.0);
        let outer = hsv_to_rgb(hue0 + spec.hue_drift * tf, 0.85, 0.95);
        let inner = hsv_to_rgb(hue0 + spec.hue_drift * tf + 150.0, 0.7, 0.6);
        let heat = (heat0 + spec.tir_drift * tf).clamp(120.0, 255.0);
        let mut mask = vec![false; w * h];
        let (x0, y0, x1, y1) = pixel_span(&gt, spec);
        for y in y0..y1 {
            for x in x0..x1 {
                let r = shape_radius(&gt, x, y, exponent);
                if r <= 1.0 {
                    let color = if r < 0.5 { inner } else { outer };
                    rgb[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&color);
                    tir[y * w + x] = heat * (1.0 - 0.25 * r * r);
                    mask[y * w + x] = true;
                }
            }
        }

        // Occluders: flat grey slabs covering one side of the target.
        let mut hidden = false;
        for (k, &start) in occlusion_starts.iter().enumerate() {
            if t < start || t >= start + spec.occlusion_length {
                continue;
            }
            let cover = (gt.w * spec.occlusion_cover).round();
            if cover <= 0.0 {
                continue;
            }
            let ox = if occlusion_from_left[k] { gt.x - 2.0 } else { gt.x + gt.w - cover };
            let slab = BBox::new(ox, gt.y - 3.0, cover + 2.0, gt.h + 6.0);
            let (x0, y0, x1, y1) = pixel_span(&slab, spec);
            for y in y0..y1 {
                for x in x0..x1 {
                    rgb[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&[128.0, 128.0, 128.0]);
                    tir[y * w + x] = 90.0;
                    hidden |= mask[y * w + x];
                    mask[y * w + x] = false;
                }
            }
        }

        let mut rgb_frame = Frame::filled(w, h, 3, 0);
        for (dst, src) in rgb_frame.data.iter_mut().zip(&rgb) {
            *dst = to_u8(src * illum + noise.sample(&mut rng));
        }
        let mut tir_frame = Frame::filled(w, h, 1, 0);
        for (dst, src) in tir_frame.data.iter_mut().zip(&tir) {
            *dst = to_u8(src + 0.5 * noise.sample(&mut rng));
        }
        frames.push((rgb_frame, tir_frame));
        groundtruth.push(gt);
        occluded.push(hidden);
        target_masks.push(mask);
    }

    Ok(SynthSequence {
        sequence: Sequence {
            name: format!("synth_{seed:016x}"),
            frames,
            groundtruth,
        },
        occluded,
        target_masks,
    })
}

/// Renders and writes a sequence directory.
pub fn synth_sequence(spec: &SynthSpec, seed: u64, out_dir: &Path) -> Result<SequenceDir> {
    render(spec, seed)?.sequence.write(out_dir)
}

/// Seed of the `index`-th sequence of a dataset drawn from `seed`.
pub fn dataset_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64 + 1)
}

/// `count` independent sequences.
pub fn render_dataset(spec: &SynthSpec, seed: u64, count: usize) -> Result<Vec<Sequence>> {
    (0..count)
        .map(|i| render(spec, dataset_seed(seed, i)).map(|s| s.sequence))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> SynthSpec {
        SynthSpec {
            length: 20,
            width: 64,
            height: 48,
            target_min: 8.0,
            target_max: 14.0,
            occlusion_length: 4,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        synth_sequence(&small(), 7, a.path()).unwrap();
        synth_sequence(&small(), 7, b.path()).unwrap();
        for rel in ["groundtruth.txt", "visible/000001.ppm", "infrared/000020.pgm"] {
            assert_eq!(
                std::fs::read(a.path().join(rel)).unwrap(),
                std::fs::read(b.path().join(rel)).unwrap(),
                "{rel}"
            );
        }
        assert_ne!(render(&small(), 7).unwrap(), render(&small(), 8).unwrap());
    }

    #[test]
    fn zero_motion_keeps_gt_constant() {
        let s = render(&small().still(), 3).unwrap();
        let gt = &s.sequence.groundtruth;
        assert!(gt.iter().all(|b| b == &gt[0]));
    }

    #[test]
    fn occlusion_hides_pixels_but_not_the_box() {
        let spec = SynthSpec {
            occlusions: 1,
            occlusion_length: 5,
            ..small().still()
        };
        let s = render(&spec, 11).unwrap();
        let first = s.occluded.iter().position(|&o| o).expect("an occluded frame");
        let visible = |i: usize| s.target_masks[i].iter().filter(|&&m| m).count();
        assert!(visible(first) < visible(0));
        assert!(visible(first) > 0);
        assert_eq!(s.sequence.groundtruth[first], s.sequence.groundtruth[0]);
    }

    #[test]
    fn oversized_target_is_rejected() {
        let spec = SynthSpec {
            target_max: 60.0,
            ..small()
        };
        assert!(matches!(render(&spec, 0), Err(Error::Config(_))));
    }

    #[test]
    fn spec_text_round_trip() {
        let spec = small();
        assert_eq!(SynthSpec::from_text(&spec.to_text()).unwrap(), spec);
        assert!(matches!(SynthSpec::from_text("bogus = 1"), Err(Error::Line { line: 1, .. })));
    }

    /// Fraction of target pixels whose centre lies inside the rasterized box.
    fn coverage(mask: &[bool], width: usize, b: &BBox) -> f64 {
        let mut total = 0;
        let mut inside = 0;
        for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
            let (x, y) = ((i % width) as f64 + 0.5, (i / width) as f64 + 0.5);
            total += 1;
            if x >= b.x && x < b.x + b.w && y >= b.y && y < b.y + b.h {
                inside += 1;
            }
        }
        if total == 0 {
            1.0
        } else {
            inside as f64 / total as f64
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn gt_box_covers_rendered_target(seed in any::<u64>()) {
            let spec = small();
            let s = render(&spec, seed).unwrap();
            for (i, gt) in s.sequence.groundtruth.iter().enumerate() {
                prop_assert!(gt.x >= 0.0 && gt.y >= 0.0);
                prop_assert!(gt.x + gt.w <= spec.width as f64 && gt.y + gt.h <= spec.height as f64);
                if !s.occluded[i] {
                    prop_assert!(coverage(&s.target_masks[i], spec.width, gt) >= 0.99);
                    prop_assert!(s.target_masks[i].iter().any(|&m| m));
                }
            }
        }
    }
}
