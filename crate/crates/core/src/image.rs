use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Rgb,
    Tir,
}

impl Modality {
    pub fn channels(self) -> usize {
        match self {
            Modality::Rgb => 3,
            Modality::Tir => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Tir => "tir",
        }
    }
}

/// 8-bit interleaved frame as stored on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::dim(
                "Frame::new",
                format!("{width}x{height}x{channels} needs {} bytes, got {}", width * height * channels, data.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }
}

/// Crop of one modality with values in `[0, 1]`, shape `[H, W, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalImage {
    pub pixels: Tensor,
    pub modality: Modality,
}

impl ModalImage {
    pub fn new(pixels: Tensor, modality: Modality) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 3 || !(s[2] == 1 || s[2] == 3) {
            return Err(Error::dim("ModalImage", format!("expected [H, W, 1|3], got {s:?}")));
        }
        Ok(Self { pixels, modality })
    }

    pub fn constant(size: usize, modality: Modality, value: f64) -> Self {
        Self {
            pixels: Tensor::full(&[size, size, modality.channels()], value),
            modality,
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[2]
    }

    /// Per-channel `(v - mean) / std`; the model consumes normalized crops.
    pub fn normalized(&self, mean: f64, std: f64) -> ModalImage {
        let data = self.pixels.data().iter().map(|v| (v - mean) / std).collect();
        ModalImage {
            pixels: Tensor::from_parts(self.pixels.shape().to_vec(), data),
            modality: self.modality,
        }
    }
}
