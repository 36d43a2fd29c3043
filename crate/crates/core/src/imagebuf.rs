//! Float RGB images and 8-bit PNG interchange.

use std::path::Path;

use crate::error::{DerfError, Result};
use crate::geometry::Vec3;

/// Row-major linear RGB image with values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<Vec3>,
}

impl FloatImage {
    pub fn new(width: u32, height: u32, pixels: Vec<Vec3>) -> Result<Self> {
        if pixels.len() != width as usize * height as usize {
            return Err(DerfError::Shape(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(FloatImage { width, height, pixels })
    }

    pub fn filled(width: u32, height: u32, value: Vec3) -> Self {
        FloatImage {
            width,
            height,
            pixels: vec![value; width as usize * height as usize],
        }
    }

    pub fn get(&self, col: u32, row: u32) -> Vec3 {
        self.pixels[(row * self.width + col) as usize]
    }

    pub fn same_dims(&self, other: &FloatImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Largest per-channel absolute difference.
    pub fn max_abs_diff(&self, other: &FloatImage) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs().max())
            .fold(0.0, f64::max)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let mut out = image::RgbImage::new(self.width, self.height);
        for (px, v) in out.pixels_mut().zip(&self.pixels) {
            *px = image::Rgb([quantize(v.x), quantize(v.y), quantize(v.z)]);
        }
        out
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let pixels = img
            .pixels()
            .map(|p| Vec3::new(p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0))
            .collect();
        FloatImage {
            width: img.width(),
            height: img.height(),
            pixels,
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|source| DerfError::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| DerfError::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    /// Applies the 8-bit quantization a PNG round trip would.
    pub fn quantized(&self) -> Self {
        Self::from_rgb8(&self.to_rgb8())
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
