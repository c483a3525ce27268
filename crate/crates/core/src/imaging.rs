//! Image decoding and conversion to network input tensors.

use std::path::Path;

use image::imageops::FilterType;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_rgb(&bytes, &path.display().to_string())
}

pub fn decode_rgb(bytes: &[u8], what: &str) -> Result<RgbImage> {
    image::load_from_memory(bytes)
        .map(|img| img.to_rgb8())
        .map_err(|e| Error::Decode {
            what: what.to_string(),
            message: e.to_string(),
        })
}

/// Pixel scaling applied after resizing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelScaling {
    /// `x / 127.5 - 1`, the convention published with Inception V3 and Xception.
    MinusOneToOne,
    /// `x / 255`.
    ZeroToOne,
}

impl PixelScaling {
    #[inline]
    pub fn apply(self, v: u8) -> f64 {
        match self {
            PixelScaling::MinusOneToOne => v as f64 / 127.5 - 1.0,
            PixelScaling::ZeroToOne => v as f64 / 255.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub input_size: u32,
    pub resize: ResizeFilter,
    pub scaling: PixelScaling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeFilter {
    Bilinear,
}

/// Channel-major (CHW) `f64` image tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor3 {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
}

pub fn resize_to(img: &RgbImage, size: u32) -> RgbImage {
    if img.width() == size && img.height() == size {
        img.clone()
    } else {
        image::imageops::resize(img, size, size, FilterType::Triangle)
    }
}

impl Preprocessing {
    pub fn to_tensor(&self, img: &RgbImage) -> Tensor3 {
        let img = resize_to(img, self.input_size);
        let s = self.input_size as usize;
        let mut t = Tensor3::zeros(3, s, s);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                *t.at_mut(c, y as usize, x as usize) = self.scaling.apply(px[c]);
            }
        }
        t
    }
}
