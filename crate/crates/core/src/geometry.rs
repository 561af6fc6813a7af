//! Boxes and the square context crops the tracker works on.

use crate::error::{Error, Result};
use crate::image::{Frame, ModalImage, Modality};
use crate::tensor::Tensor;

/// Axis-aligned box in pixels, top-left corner plus size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) && self.w >= 0.0 && self.h >= 0.0
    }

    pub fn is_degenerate(&self) -> bool {
        !self.is_valid() || self.area() <= 0.0
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::new(self.x * s, self.y * s, self.w * s, self.h * s)
    }

    /// Clips to `[0, width] x [0, height]` keeping at least `min_size` pixels per side.
    pub fn clamp_to(&self, width: f64, height: f64, min_size: f64) -> Self {
        let w = self.w.max(min_size).min(width);
        let h = self.h.max(min_size).min(height);
        let x = self.x.max(0.0).min(width - w);
        let y = self.y.max(0.0).min(height - h);
        Self::new(x, y, w, h)
    }
}

/// Affine map between image pixels and a square crop: `crop = (img - origin) * scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub origin_x: f64,
    pub origin_y: f64,
    pub scale: f64,
    pub out_size: usize,
}

impl CropWindow {
    /// Square window of side `factor * sqrt(w * h)` centred on `b`.
    pub fn around(b: &BBox, factor: f64, out_size: usize) -> Result<Self> {
        if factor < 1.0 {
            return Err(Error::config(format!("crop factor {factor} < 1")));
        }
        if b.is_degenerate() {
            return Err(Error::contract(format!("degenerate crop box {b:?}")));
        }
        let side = factor * (b.w * b.h).sqrt();
        let (cx, cy) = b.center();
        Ok(Self {
            origin_x: cx - side / 2.0,
            origin_y: cy - side / 2.0,
            scale: out_size as f64 / side,
            out_size,
        })
    }

    pub fn side(&self) -> f64 {
        self.out_size as f64 / self.scale
    }

    pub fn image_to_crop(&self, b: &BBox) -> BBox {
        BBox::new(
            (b.x - self.origin_x) * self.scale,
            (b.y - self.origin_y) * self.scale,
            b.w * self.scale,
            b.h * self.scale,
        )
    }

    pub fn crop_to_image(&self, b: &BBox) -> BBox {
        BBox::new(
            b.x / self.scale + self.origin_x,
            b.y / self.scale + self.origin_y,
            b.w / self.scale,
            b.h / self.scale,
        )
    }
}

/// Bilinear resample of `frame` through `win`. Samples whose centre falls
/// outside the frame are zero; inside, taps are clamped to the border.
pub fn crop_frame(frame: &Frame, win: &CropWindow, modality: Modality) -> Result<ModalImage> {
    let ch = modality.channels();
    if frame.channels != ch {
        return Err(Error::contract(format!(
            "{} crop from a {}-channel frame",
            modality.as_str(),
            frame.channels
        )));
    }
    let n = win.out_size;
    let (fw, fh) = (frame.width as f64, frame.height as f64);
    let mut out = vec![0.0; n * n * ch];
    let inv = 1.0 / win.scale;
    for v in 0..n {
        let sy = win.origin_y + (v as f64 + 0.5) * inv;
        if sy < 0.0 || sy >= fh {
            continue;
        }
        let py = (sy - 0.5).max(0.0);
        let y0 = (py.floor() as usize).min(frame.height - 1);
        let y1 = (y0 + 1).min(frame.height - 1);
        let ly = (py - y0 as f64).clamp(0.0, 1.0);
        for u in 0..n {
            let sx = win.origin_x + (u as f64 + 0.5) * inv;
            if sx < 0.0 || sx >= fw {
                continue;
            }
            let px = (sx - 0.5).max(0.0);
            let x0 = (px.floor() as usize).min(frame.width - 1);
            let x1 = (x0 + 1).min(frame.width - 1);
            let lx = (px - x0 as f64).clamp(0.0, 1.0);
            for c in 0..ch {
                let f = |x: usize, y: usize| frame.get(x, y, c) as f64 / 255.0;
                let (a, b) = (f(x0, y0), f(x1, y0));
                let (d, e) = (f(x0, y1), f(x1, y1));
                let top = a + (b - a) * lx;
                let bot = d + (e - d) * lx;
                out[(v * n + u) * ch + c] = top + (bot - top) * ly;
            }
        }
    }
    ModalImage::new(Tensor::from_parts(vec![n, n, ch], out), modality)
}

/// RGB and TIR crops of the same window.
#[derive(Clone, Debug)]
pub struct CropPair {
    pub rgb: ModalImage,
    pub tir: ModalImage,
    pub window: CropWindow,
}

/// Crops both modalities around `center_box`.
///
/// A degenerate `center_box` falls back to `fallback` (the last valid box);
/// without one the call fails.
pub fn crop_window(
    rgb: &Frame,
    tir: &Frame,
    center_box: &BBox,
    fallback: Option<&BBox>,
    factor: f64,
    out_size: usize,
) -> Result<CropPair> {
    let b = if center_box.is_degenerate() {
        *fallback
            .filter(|f| !f.is_degenerate())
            .ok_or_else(|| Error::contract("degenerate box and no previous valid box"))?
    } else {
        *center_box
    };
    let window = CropWindow::around(&b, factor, out_size)?;
    Ok(CropPair {
        rgb: crop_frame(rgb, &window, Modality::Rgb)?,
        tir: crop_frame(tir, &window, Modality::Tir)?,
        window,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn corner_round_trip_within_half_pixel() {
        let b = BBox::new(200.0, 150.0, 40.0, 30.0);
        let win = CropWindow::around(&b, 2.0, 128).unwrap();
        let back = win.crop_to_image(&win.image_to_crop(&b));
        for (p, q) in [(back.x, b.x), (back.y, b.y), (back.x + back.w, b.x + b.w), (back.y + back.h, b.y + b.h)] {
            assert!((p - q).abs() < 0.5);
        }
        let c = win.image_to_crop(&b);
        assert!((c.center().0 - 64.0).abs() < 1e-9 && (c.center().1 - 64.0).abs() < 1e-9);
    }

    #[test]
    fn constant_frame_gives_constant_crop() {
        let rgb = Frame::filled(100, 100, 3, 200);
        let tir = Frame::filled(100, 100, 1, 51);
        let pair = crop_window(&rgb, &tir, &BBox::new(40.0, 40.0, 20.0, 20.0), None, 2.0, 32).unwrap();
        assert!(pair.rgb.pixels.data().iter().all(|&v| v == 200.0 / 255.0));
        assert!(pair.tir.pixels.data().iter().all(|&v| v == 0.2));
    }

    #[test]
    fn corner_box_pads_with_exact_zeros() {
        let rgb = Frame::filled(64, 64, 3, 255);
        let tir = Frame::filled(64, 64, 1, 255);
        let pair = crop_window(&rgb, &tir, &BBox::new(0.0, 0.0, 8.0, 8.0), None, 4.0, 32).unwrap();
        // Window spans [-12, 20) in both axes; 12 of 32 image pixels -> first 12 crop pixels are padding.
        let px = |u: usize, v: usize| pair.tir.pixels.data()[v * 32 + u];
        for v in 0..32 {
            for u in 0..32 {
                if u < 12 || v < 12 {
                    assert_eq!(px(u, v), 0.0);
                } else {
                    assert_eq!(px(u, v), 1.0);
                }
            }
        }
    }

    #[test]
    fn degenerate_box_uses_fallback() {
        let rgb = Frame::filled(50, 50, 3, 0);
        let tir = Frame::filled(50, 50, 1, 0);
        let bad = BBox::new(10.0, 10.0, 0.0, 5.0);
        assert!(crop_window(&rgb, &tir, &bad, None, 2.0, 16).is_err());
        let good = BBox::new(10.0, 10.0, 8.0, 8.0);
        let pair = crop_window(&rgb, &tir, &bad, Some(&good), 2.0, 16).unwrap();
        assert_eq!(pair.window, CropWindow::around(&good, 2.0, 16).unwrap());
    }

    proptest! {
        #[test]
        fn any_box_round_trips(
            x in -50.0f64..500.0, y in -50.0f64..500.0, w in 1.0f64..200.0, h in 1.0f64..200.0,
            cx in 0.0f64..400.0, cy in 0.0f64..400.0, cw in 4.0f64..100.0, factor in 1.0f64..5.0,
        ) {
            let win = CropWindow::around(&BBox::new(cx, cy, cw, cw), factor, 256).unwrap();
            let b = BBox::new(x, y, w, h);
            let c = win.image_to_crop(&b);
            let back = win.crop_to_image(&c);
            prop_assert!((back.x - b.x).abs() < 0.5 && (back.y - b.y).abs() < 0.5);
            prop_assert!((back.w - b.w).abs() < 0.5 && (back.h - b.h).abs() < 0.5);
            let again = win.image_to_crop(&back);
            prop_assert!((again.x - c.x).abs() < 0.5 && (again.w - c.w).abs() < 0.5);
        }
    }
}
