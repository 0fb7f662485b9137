//! Interfaces for every pretrained-model dependency, and the deterministic
//! toy/mock implementations the engine and its tests run on.
//!
//! Real-weights adapters plug in through [`AdapterLayer`]; the pipelines only
//! ever see a [`BackendSet`].

pub mod mock;
pub mod toy;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{AttentionError, CrossAttention, LayerInfo, TokenEmbeddings};
use crate::layout::{BBox, BinaryMask};
use crate::tensor::{Image, Latent, TensorError};

pub use mock::{BrightnessSegmenter, FixedSegmenter, HashEmbedder};
pub use toy::{toy_denoiser_predict, ToyCodec, ToyDenoiser, ToyTextEncoder, ToyWorld};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("prompt {0:?} is not registered with the toy world")]
    UnknownPrompt(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("backend contract violated: {0}")]
    Contract(String),
    #[error("no adapter for {kind} backend {reference:?}")]
    Unsupported { kind: &'static str, reference: String },
    #[error("backend failure: {0}")]
    Failure(String),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Whether a backend may serve several generations at once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Concurrency {
    Concurrent,
    Serialized,
}

/// Extra conditioning consumed by inpainting denoisers, at latent
/// resolution: the latent of the masked known image and the region to fill.
#[derive(Debug, Clone)]
pub struct InpaintConditioning {
    pub masked_image: Latent,
    pub mask: BinaryMask,
}

/// Noise prediction ε_θ(x_t, t, τ). Cross-attention layers must be routed
/// through `attention`.
pub trait Denoiser: Send + Sync {
    fn name(&self) -> &str;

    fn concurrency(&self) -> Concurrency {
        Concurrency::Concurrent
    }

    /// Cross-attention layers used for a latent of the given size.
    fn attention_layers(&self, latent_h: usize, latent_w: usize) -> Vec<LayerInfo>;

    fn predict_noise(
        &self,
        x_t: &Latent,
        t: usize,
        text: &TokenEmbeddings,
        inpaint: Option<&InpaintConditioning>,
        attention: &dyn CrossAttention,
    ) -> Result<Latent, BackendError>;
}

pub trait TextEncoder: Send + Sync {
    fn name(&self) -> &str;
    fn encode(&self, prompt: &str) -> Result<TokenEmbeddings, BackendError>;
}

/// Pixel ↔ latent mapping with an integer downscale factor.
pub trait LatentCodec: Send + Sync {
    fn name(&self) -> &str;
    fn downscale(&self) -> usize;
    fn latent_channels(&self) -> usize;
    fn encode(&self, image: &Image) -> Result<Latent, BackendError>;
    fn decode(&self, latent: &Latent) -> Result<Image, BackendError>;
}

/// A candidate mask with the segmenter's confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredMask {
    pub mask: BinaryMask,
    pub score: f64,
}

/// Box-prompted segmentation.
pub trait Segmenter: Send + Sync {
    fn name(&self) -> &str;

    fn concurrency(&self) -> Concurrency {
        Concurrency::Concurrent
    }

    fn segment(&self, image: &Image, bbox: BBox) -> Result<Vec<ScoredMask>, BackendError>;
}

/// Joint image/text embedding space. Outputs are unit vectors.
pub trait ImageTextEmbedder: Send + Sync {
    fn name(&self) -> &str;
    fn embed_image(&self, image: &Image) -> Result<Vec<f64>, BackendError>;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>, BackendError>;
}

#[derive(Clone)]
pub struct BackendSet {
    pub denoiser: Arc<dyn Denoiser>,
    pub inpaint_denoiser: Arc<dyn Denoiser>,
    pub text_encoder: Arc<dyn TextEncoder>,
    pub latent_codec: Arc<dyn LatentCodec>,
    pub segmenter: Arc<dyn Segmenter>,
    pub embedder: Arc<dyn ImageTextEmbedder>,
}

impl std::fmt::Debug for BackendSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_map().entries(self.identifiers()).finish()
    }
}

impl BackendSet {
    /// Serialized if any model that runs per object requires it.
    pub fn concurrency(&self) -> Concurrency {
        let all = [
            self.denoiser.concurrency(),
            self.inpaint_denoiser.concurrency(),
            self.segmenter.concurrency(),
        ];
        if all.contains(&Concurrency::Serialized) {
            Concurrency::Serialized
        } else {
            Concurrency::Concurrent
        }
    }

    /// Backend names, recorded in provenance sidecars.
    pub fn identifiers(&self) -> BTreeMap<String, String> {
        [
            ("denoiser", self.denoiser.name()),
            ("inpaint_denoiser", self.inpaint_denoiser.name()),
            ("text_encoder", self.text_encoder.name()),
            ("latent_codec", self.latent_codec.name()),
            ("segmenter", self.segmenter.name()),
            ("embedder", self.embedder.name()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
    }

    /// Encodes a prompt and checks the token-index contract.
    pub fn encode_text(&self, prompt: &str) -> Result<TokenEmbeddings, BackendError> {
        let text = self.text_encoder.encode(prompt)?;
        if !(text.sot_index < text.eot_index && text.eot_index < text.tokens()) {
            return Err(BackendError::Contract(format!(
                "text encoder reported sot={} eot={} for {} tokens",
                text.sot_index,
                text.eot_index,
                text.tokens()
            )));
        }
        Ok(text)
    }
}

/// Checks the shape contract of a noise prediction.
pub fn check_prediction(x_t: &Latent, eps: &Latent) -> Result<(), BackendError> {
    if x_t.shape() != eps.shape() {
        return Err(BackendError::Contract(format!(
            "denoiser returned {:?} for input {:?}",
            eps.shape(),
            x_t.shape()
        )));
    }
    Ok(())
}

/// Checks the unit-norm contract of an embedding.
pub fn check_unit(v: &[f64]) -> Result<(), BackendError> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (n - 1.0).abs() > 1e-5 {
        return Err(BackendError::Contract(format!(
            "embedding norm {n} is not 1"
        )));
    }
    Ok(())
}

/// Backend references from the engine config. `toy` / `mock` select the
/// bundled implementations; anything else is an opaque checkpoint reference
/// resolved by an [`AdapterLayer`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendSelection {
    pub denoiser: String,
    pub inpaint_denoiser: String,
    pub text_encoder: String,
    pub latent_codec: String,
    pub segmenter: String,
    pub embedder: String,
}

impl Default for BackendSelection {
    fn default() -> Self {
        Self {
            denoiser: "toy".into(),
            inpaint_denoiser: "toy".into(),
            text_encoder: "toy".into(),
            latent_codec: "toy".into(),
            segmenter: "mock".into(),
            embedder: "mock".into(),
        }
    }
}

/// Settings of the bundled toy backends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySettings {
    /// Pixel-unshuffle factor of the toy codec (1 = identity).
    pub codec_factor: usize,
    /// Brightness threshold of the mock segmenter, in `[-1, 1]`.
    pub segmenter_threshold: f64,
    pub embedding_dim: usize,
}

impl Default for ToySettings {
    fn default() -> Self {
        Self {
            codec_factor: 8,
            segmenter_threshold: -0.9,
            embedding_dim: 64,
        }
    }
}

/// Resolves a [`BackendSelection`] into live backends. The toy world is
/// needed because toy denoisers are keyed by prompt.
pub trait AdapterLayer: Send + Sync {
    fn resolve(
        &self,
        selection: &BackendSelection,
        toy: &ToySettings,
        world: Arc<ToyWorld>,
        schedule: &crate::diffusion::Schedule,
    ) -> Result<BackendSet, BackendError>;
}

/// Resolves only the bundled toy and mock backends.
#[derive(Debug, Default, Clone, Copy)]
pub struct BundledAdapters;

impl AdapterLayer for BundledAdapters {
    fn resolve(
        &self,
        selection: &BackendSelection,
        toy: &ToySettings,
        world: Arc<ToyWorld>,
        schedule: &crate::diffusion::Schedule,
    ) -> Result<BackendSet, BackendError> {
        fn expect(kind: &'static str, got: &str, want: &str) -> Result<(), BackendError> {
            if got == want {
                Ok(())
            } else {
                Err(BackendError::Unsupported {
                    kind,
                    reference: got.to_string(),
                })
            }
        }
        expect("denoiser", &selection.denoiser, "toy")?;
        expect("inpaint_denoiser", &selection.inpaint_denoiser, "toy")?;
        expect("text_encoder", &selection.text_encoder, "toy")?;
        expect("latent_codec", &selection.latent_codec, "toy")?;
        expect("segmenter", &selection.segmenter, "mock")?;
        expect("embedder", &selection.embedder, "mock")?;
        Ok(toy::toy_backends(world, schedule.clone(), toy))
    }
}
