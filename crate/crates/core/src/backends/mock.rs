//! Deterministic segmenter and embedder mocks.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{BackendError, ImageTextEmbedder, ScoredMask, Segmenter};
use crate::layout::{BBox, BinaryMask};
use crate::tensor::Image;

/// Marks every pixel inside the box whose mean RGB exceeds a threshold.
/// Objects rendered on a black flat background segment cleanly. The whole
/// box is returned as a second, lower-scored candidate.
#[derive(Debug, Clone, Copy)]
pub struct BrightnessSegmenter {
    threshold: f64,
}

impl BrightnessSegmenter {
    pub fn new(threshold: f64) -> Self {
        Self { threshold }
    }
}

impl Segmenter for BrightnessSegmenter {
    fn name(&self) -> &str {
        "mock-brightness-segmenter"
    }

    fn segment(&self, image: &Image, bbox: BBox) -> Result<Vec<ScoredMask>, BackendError> {
        let (h, w) = image.dims();
        if !bbox.fits_within(h, w) {
            return Err(BackendError::Shape(format!(
                "box {:?} outside {h}x{w} image",
                bbox.as_xywh()
            )));
        }
        let bright = BinaryMask::from_fn(h, w, |(r, c)| {
            bbox.contains(r, c) && {
                let p = image.pixel(r, c);
                (p[0] + p[1] + p[2]) / 3.0 > self.threshold
            }
        })
        .map_err(|e| BackendError::Failure(e.to_string()))?;
        let boxed = BinaryMask::from_fn(h, w, |(r, c)| bbox.contains(r, c))
            .map_err(|e| BackendError::Failure(e.to_string()))?;
        Ok(vec![
            ScoredMask {
                mask: boxed,
                score: 0.5,
            },
            ScoredMask {
                mask: bright,
                score: 0.9,
            },
        ])
    }
}

/// Returns a fixed candidate list regardless of input.
#[derive(Debug, Clone, Default)]
pub struct FixedSegmenter {
    candidates: Vec<ScoredMask>,
}

impl FixedSegmenter {
    pub fn new(candidates: Vec<ScoredMask>) -> Self {
        Self { candidates }
    }

    pub fn single(mask: BinaryMask) -> Self {
        Self::new(vec![ScoredMask { mask, score: 1.0 }])
    }
}

impl Segmenter for FixedSegmenter {
    fn name(&self) -> &str {
        "mock-fixed-segmenter"
    }

    fn segment(&self, _image: &Image, _bbox: BBox) -> Result<Vec<ScoredMask>, BackendError> {
        Ok(self.candidates.clone())
    }
}

/// Hash-seeded Gaussian directions. Images hash their 8-bit RGB content and
/// dimensions. Explicit vectors can be pinned for texts or image contents to
/// build exact metric oracles.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    pinned_text: HashMap<String, Vec<f64>>,
    pinned_image: HashMap<[u8; 32], Vec<f64>>,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 1, "embedding dim must be >= 1");
        Self {
            dim,
            pinned_text: HashMap::new(),
            pinned_image: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Overrides the embedding of `text`. The vector is normalised.
    pub fn pin_text(&mut self, text: impl Into<String>, v: Vec<f64>) -> &mut Self {
        self.pinned_text.insert(text.into(), normalised(v));
        self
    }

    /// Overrides the embedding of any image with the same content.
    pub fn pin_image(&mut self, image: &Image, v: Vec<f64>) -> &mut Self {
        self.pinned_image.insert(image_digest(image), normalised(v));
        self
    }

    fn vector_for_digest(&self, digest: [u8; 32]) -> Vec<f64> {
        let mut rng = ChaCha8Rng::from_seed(digest);
        let v: Vec<f64> = (0..self.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        normalised(v)
    }
}

fn normalised(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        let mut e = vec![0.0; v.len()];
        if let Some(first) = e.first_mut() {
            *first = 1.0;
        }
        return e;
    }
    v.into_iter().map(|x| x / n).collect()
}

fn image_digest(image: &Image) -> [u8; 32] {
    let rgb = image.to_rgb8();
    let mut h = Sha256::new();
    h.update(b"image:");
    h.update((rgb.width() as u64).to_le_bytes());
    h.update((rgb.height() as u64).to_le_bytes());
    h.update(rgb.as_raw());
    h.finalize().into()
}

impl ImageTextEmbedder for HashEmbedder {
    fn name(&self) -> &str {
        "mock-hash-embedder"
    }

    fn embed_image(&self, image: &Image) -> Result<Vec<f64>, BackendError> {
        let digest = image_digest(image);
        Ok(match self.pinned_image.get(&digest) {
            Some(v) => v.clone(),
            None => self.vector_for_digest(digest),
        })
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        if let Some(v) = self.pinned_text.get(text) {
            return Ok(v.clone());
        }
        let mut h = Sha256::new();
        h.update(b"text:");
        h.update(text.as_bytes());
        Ok(self.vector_for_digest(h.finalize().into()))
    }
}
