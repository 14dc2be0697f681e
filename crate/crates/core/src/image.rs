//! Plain floating-point rasters: color images and depth maps.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};

/// Row-major, channel-interleaved image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, value: &[f64]) -> Self {
        let mut img = Self::new(width, height, value.len());
        for px in img.data.chunks_mut(value.len()) {
            px.copy_from_slice(value);
        }
        img
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize) -> Vec<f64>,
    ) -> Self {
        let mut img = Self::new(width, height, channels);
        for y in 0..height {
            for x in 0..width {
                let v = f(x, y);
                img.pixel_mut(x, y).copy_from_slice(&v[..channels]);
            }
        }
        img
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Luma with Rec. 601 weights; single-channel images pass through.
    pub fn to_gray(&self) -> Vec<f64> {
        match self.channels {
            1 => self.data.clone(),
            _ => self
                .data
                .chunks(self.channels)
                .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
                .collect(),
        }
    }

    /// Rounds to the 8-bit grid a PNG round trip would produce.
    pub fn quantized(&self) -> Image {
        Image {
            data: self
                .data
                .iter()
                .map(|&v| quantize(v) as f64 / 255.0)
                .collect(),
            ..self.clone()
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        match self.channels {
            1 => {
                let buf: GrayImage =
                    ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
                        Luma([quantize(self.get(x as usize, y as usize, 0))])
                    });
                buf.save(path)?;
            }
            3 => {
                let buf: RgbImage =
                    ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
                        let p = self.pixel(x as usize, y as usize);
                        Rgb([quantize(p[0]), quantize(p[1]), quantize(p[2])])
                    });
                buf.save(path)?;
            }
            c => {
                return Err(Error::DimensionMismatch(format!(
                    "cannot write a {c}-channel image as PNG"
                )))
            }
        }
        Ok(())
    }

    /// Loads an 8-bit PNG as RGB.
    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        Ok(Image {
            width: w as usize,
            height: h as usize,
            channels: 3,
            data: img.as_raw().iter().map(|&v| v as f64 / 255.0).collect(),
        })
    }
}

#[inline]
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Per-pixel depth; `f64::INFINITY` marks pixels with no surface.
///
/// Pinhole cameras store z-depth, fisheye cameras store range along the
/// unit pixel ray.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl DepthMap {
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            values: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.values[y * self.width + x] = v;
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        let d = self.get(x, y);
        d.is_finite() && d > 0.0
    }

    pub fn scaled(&self, s: f64) -> DepthMap {
        DepthMap {
            values: self.values.iter().map(|v| v * s).collect(),
            ..self.clone()
        }
    }

    /// Median over valid pixels.
    pub fn median(&self) -> Option<f64> {
        let mut v: Vec<f64> = self
            .values
            .iter()
            .copied()
            .filter(|d| d.is_finite() && *d > 0.0)
            .collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(|a, b| a.total_cmp(b));
        let n = v.len();
        Some(if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        })
    }

    /// Mean of `|D − D*| / D*` over pixels valid in both maps.
    pub fn abs_rel_error(&self, truth: &DepthMap) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (d, t) in self.values.iter().zip(&truth.values) {
            if t.is_finite() && *t > 0.0 && d.is_finite() {
                sum += (d - t).abs() / t;
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }
}
