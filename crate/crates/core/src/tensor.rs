//! Latent tensors and decoded images.

use std::path::Path;

use ndarray::{Array3, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::layout::BinaryMask;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },
    #[error("tensor contains non-finite values")]
    NonFinite,
    #[error("image i/o: {0}")]
    Image(String),
}

/// A `channels × height × width` latent. Values are always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent(Array3<f64>);

impl Latent {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self(Array3::zeros((channels, height, width)))
    }

    pub fn from_array(data: Array3<f64>) -> Result<Self, TensorError> {
        if data.iter().all(|v| v.is_finite()) {
            Ok(Self(data))
        } else {
            Err(TensorError::NonFinite)
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        f: impl FnMut((usize, usize, usize)) -> f64,
    ) -> Result<Self, TensorError> {
        Self::from_array(Array3::from_shape_fn((channels, height, width), f))
    }

    /// Standard-normal sample, filled in row-major (channel, row, column)
    /// order so a seeded generator always yields the same tensor.
    pub fn randn(channels: usize, height: usize, width: usize, rng: &mut impl Rng) -> Self {
        let n = channels * height * width;
        let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Self(Array3::from_shape_vec((channels, height, width), data).expect("sized buffer"))
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.0.dim()
    }

    pub fn channels(&self) -> usize {
        self.0.dim().0
    }

    pub fn height(&self) -> usize {
        self.0.dim().1
    }

    pub fn width(&self) -> usize {
        self.0.dim().2
    }

    pub fn as_array(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn into_array(self) -> Array3<f64> {
        self.0
    }

    pub fn check_same(&self, other: &Latent) -> Result<(), TensorError> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                expected: self.shape(),
                found: other.shape(),
            });
        }
        Ok(())
    }

    /// `a·self + b·other`, elementwise.
    pub fn axpby(&self, a: f64, other: &Latent, b: f64) -> Result<Latent, TensorError> {
        self.check_same(other)?;
        Ok(Latent(
            Zip::from(&self.0)
                .and(&other.0)
                .map_collect(|&x, &y| a * x + b * y),
        ))
    }

    /// Per-pixel selection: `mask ? inside : outside`, shared across channels.
    pub fn select(
        mask: &BinaryMask,
        inside: &Latent,
        outside: &Latent,
    ) -> Result<Latent, TensorError> {
        inside.check_same(outside)?;
        let (c, h, w) = inside.shape();
        if mask.dims() != (h, w) {
            return Err(TensorError::ShapeMismatch {
                expected: (c, h, w),
                found: (c, mask.height(), mask.width()),
            });
        }
        let data = Array3::from_shape_fn((c, h, w), |(k, r, col)| {
            if mask.get(r, col) {
                inside.0[(k, r, col)]
            } else {
                outside.0[(k, r, col)]
            }
        });
        Ok(Latent(data))
    }

    pub fn max_abs_diff(&self, other: &Latent) -> f64 {
        Zip::from(&self.0)
            .and(&other.0)
            .fold(0.0f64, |m, &a, &b| m.max((a - b).abs()))
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Raw little-endian dump: `c, h, w` as u32 followed by f64 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (c, h, w) = self.shape();
        let mut out = Vec::with_capacity(12 + 8 * c * h * w);
        for d in [c, h, w] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in self.0.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Latent, TensorError> {
        let bad = || TensorError::Image("truncated latent dump".into());
        if bytes.len() < 12 {
            return Err(bad());
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
        let (c, h, w) = (dim(0), dim(1), dim(2));
        let body = &bytes[12..];
        if body.len() != 8 * c * h * w {
            return Err(bad());
        }
        let data: Vec<f64> = body
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Latent::from_array(Array3::from_shape_vec((c, h, w), data).map_err(|_| bad())?)
    }
}

/// Decoded RGB image, `height × width × 3`, values in the codec's normalized
/// range `[-1, 1]` (−1 is black).
#[derive(Debug, Clone, PartialEq)]
pub struct Image(Array3<f64>);

impl Image {
    pub fn from_array(data: Array3<f64>) -> Result<Self, TensorError> {
        let (_, _, c) = data.dim();
        if c != 3 {
            return Err(TensorError::ShapeMismatch {
                expected: (data.dim().0, data.dim().1, 3),
                found: data.dim(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite);
        }
        Ok(Self(data))
    }

    pub fn constant(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        Self(Array3::from_shape_fn((height, width, 3), |(_, _, c)| rgb[c]))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Array3::zeros((height, width, 3)))
    }

    pub fn height(&self) -> usize {
        self.0.dim().0
    }

    pub fn width(&self) -> usize {
        self.0.dim().1
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn as_array(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn as_array_mut(&mut self) -> &mut Array3<f64> {
        &mut self.0
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        [self.0[(row, col, 0)], self.0[(row, col, 1)], self.0[(row, col, 2)]]
    }

    pub fn crop(&self, bbox: &crate::layout::BBox) -> Image {
        let view = self
            .0
            .slice(ndarray::s![bbox.y..bbox.y + bbox.h, bbox.x..bbox.x + bbox.w, ..]);
        Image(view.to_owned())
    }

    /// Pixel-space compositing shared by channels.
    pub fn select(mask: &BinaryMask, inside: &Image, outside: &Image) -> Result<Image, TensorError> {
        if inside.dims() != outside.dims() || mask.dims() != inside.dims() {
            return Err(TensorError::ShapeMismatch {
                expected: inside.0.dim(),
                found: (mask.height(), mask.width(), 3),
            });
        }
        Ok(Image(Array3::from_shape_fn(inside.0.dim(), |(r, c, k)| {
            if mask.get(r, c) {
                inside.0[(r, c, k)]
            } else {
                outside.0[(r, c, k)]
            }
        })))
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width() as u32, self.height() as u32, |x, y| {
            let p = self.pixel(y as usize, x as usize);
            image::Rgb(p.map(|v| (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8))
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Image {
        let (w, h) = img.dimensions();
        Image(Array3::from_shape_fn((h as usize, w as usize, 3), |(r, c, k)| {
            img.get_pixel(c as u32, r as u32)[k] as f64 / 127.5 - 1.0
        }))
    }

    pub fn save_png(&self, path: &Path) -> Result<(), TensorError> {
        self.to_rgb8()
            .save(path)
            .map_err(|e| TensorError::Image(format!("{}: {e}", path.display())))
    }

    pub fn load_png(path: &Path) -> Result<Image, TensorError> {
        let img = image::open(path)
            .map_err(|e| TensorError::Image(format!("{}: {e}", path.display())))?
            .to_rgb8();
        Ok(Image::from_rgb8(&img))
    }
}
