//! Analytic stand-ins for the diffusion models.
//!
//! A [`ToyWorld`] maps prompts to target latents. The toy denoiser predicts
//! exactly the noise under which the clean-latent estimate equals the
//! target, so DDIM chains converge on it. Which target a pixel sees is
//! decided by real cross-attention: every non-SOT token of a prompt carries a
//! one-hot "prompt identity" as its value vector and SOT carries zeros, so
//! the attention output at a pixel says which prompts it attended to. That
//! makes prompt routing (ReGCA) observable while leaving single-prompt
//! predictions exact.

use std::sync::Arc;

use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{
    mock, BackendError, BackendSet, Denoiser, InpaintConditioning, LatentCodec, TextEncoder,
    ToySettings,
};
use crate::attention::{
    BlockPosition, CrossAttention, HeadKv, KvProjector, LayerInfo, Matrix, TokenEmbeddings,
};
use crate::diffusion::Schedule;
use crate::tensor::{Image, Latent};

const FEATURE_DIM: usize = 8;
const HEAD_DIM: usize = 4;
const HEADS: usize = 2;
const MAX_TOKENS: usize = 16;

/// Prompt → target latent table. Registration order defines each prompt's
/// identity index.
#[derive(Debug, Clone, Default)]
pub struct ToyWorld {
    prompts: Vec<(String, Latent)>,
    background: Option<Latent>,
}

impl ToyWorld {
    pub fn new() -> Self {
        Self::default()
    }

    /// Target used where a pixel attends to nothing but SOT. Defaults to
    /// zeros.
    pub fn with_background(mut self, background: Latent) -> Self {
        self.background = Some(background);
        self
    }

    pub fn register(&mut self, prompt: impl Into<String>, target: Latent) -> &mut Self {
        let prompt = prompt.into();
        match self.prompts.iter_mut().find(|(p, _)| *p == prompt) {
            Some(slot) => slot.1 = target,
            None => self.prompts.push((prompt, target)),
        }
        self
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn index_of(&self, prompt: &str) -> Option<usize> {
        self.prompts.iter().position(|(p, _)| p == prompt)
    }

    pub fn target(&self, prompt: &str) -> Result<&Latent, BackendError> {
        self.prompts
            .iter()
            .find(|(p, _)| p == prompt)
            .map(|(_, t)| t)
            .ok_or_else(|| BackendError::UnknownPrompt(prompt.to_string()))
    }

    fn target_at(&self, index: usize) -> &Latent {
        &self.prompts[index].1
    }

    /// Registers a deterministic, hash-derived target for every prompt:
    /// a colour field with a faint stripe pattern, encoded by `codec`. The
    /// empty prompt maps to mid-grey.
    pub fn procedural<'a>(
        prompts: impl IntoIterator<Item = &'a str>,
        height: usize,
        width: usize,
        codec: &dyn LatentCodec,
    ) -> Result<Self, BackendError> {
        let mut world = Self::new();
        for p in prompts {
            if world.index_of(p).is_some() {
                continue;
            }
            let img = procedural_image(p, height, width);
            world.register(p, codec.encode(&img)?);
        }
        Ok(world)
    }
}

fn seeded(tag: &str) -> ChaCha8Rng {
    let digest = Sha256::digest(tag.as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

fn procedural_image(prompt: &str, height: usize, width: usize) -> Image {
    if prompt.is_empty() {
        return Image::zeros(height, width);
    }
    let mut rng = seeded(&format!("toy-target:{prompt}"));
    let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.5..0.9));
    let freq = rng.random_range(2.0..6.0) * std::f64::consts::PI / height.max(1) as f64;
    let data = Array3::from_shape_fn((height, width, 3), |(r, c, k)| {
        color[k] + 0.08 * ((r as f64 + 0.5 * c as f64) * freq).sin()
    });
    Image::from_array(data).expect("finite procedural image")
}

fn random_matrix(tag: &str, rows: usize, cols: usize) -> Matrix {
    let mut rng = seeded(tag);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// The analytic oracle: `(x_t − √α_t·target)/√(1−α_t)`.
pub fn toy_denoiser_predict(
    x_t: &Latent,
    t: usize,
    prompt: &str,
    world: &ToyWorld,
    schedule: &Schedule,
) -> Result<Latent, BackendError> {
    let target = world.target(prompt)?;
    noise_towards(x_t, target, t, schedule)
}

fn noise_towards(
    x_t: &Latent,
    target: &Latent,
    t: usize,
    schedule: &Schedule,
) -> Result<Latent, BackendError> {
    if t == 0 || t > schedule.train_steps() {
        return Err(BackendError::Failure(format!("timestep {t} out of range")));
    }
    if target.shape() != x_t.shape() {
        return Err(BackendError::Shape(format!(
            "toy target {:?} vs latent {:?}",
            target.shape(),
            x_t.shape()
        )));
    }
    let a = schedule.alpha_bar(t);
    let inv = 1.0 / (1.0 - a).sqrt();
    Ok(x_t.axpby(inv, target, -a.sqrt() * inv)?)
}

/// Whitespace tokenizer over a fixed vocabulary-free hash embedding.
/// Token rows are `[features | prompt identity]`.
pub struct ToyTextEncoder {
    world: Arc<ToyWorld>,
}

impl ToyTextEncoder {
    pub fn new(world: Arc<ToyWorld>) -> Self {
        Self { world }
    }
}

impl TextEncoder for ToyTextEncoder {
    fn name(&self) -> &str {
        "toy-text"
    }

    fn encode(&self, prompt: &str) -> Result<TokenEmbeddings, BackendError> {
        let id = self
            .world
            .index_of(prompt)
            .ok_or_else(|| BackendError::UnknownPrompt(prompt.to_string()))?;
        let n_id = self.world.len();
        let words: Vec<&str> = prompt.split_whitespace().take(MAX_TOKENS - 2).collect();
        let eot_index = words.len() + 1;
        let mut embeddings = Matrix::zeros((MAX_TOKENS, FEATURE_DIM + n_id));
        for tok in 0..MAX_TOKENS {
            let label = match tok {
                0 => "<sot>",
                t if t < eot_index => words[t - 1],
                t if t == eot_index => "<eot>",
                _ => "<pad>",
            };
            let feats = random_matrix(&format!("toy-token:{label}"), 1, FEATURE_DIM);
            embeddings
                .slice_mut(s![tok, ..FEATURE_DIM])
                .assign(&feats.row(0));
            if tok != 0 {
                embeddings[(tok, FEATURE_DIM + id)] = 1.0;
            }
        }
        Ok(TokenEmbeddings {
            embeddings,
            sot_index: 0,
            eot_index,
        })
    }
}

struct ToyProjector {
    layer: usize,
}

impl KvProjector for ToyProjector {
    fn project(&self, text: &TokenEmbeddings) -> Vec<HeadKv> {
        let feats = text.embeddings.slice(s![.., ..FEATURE_DIM]);
        let ident = text.embeddings.slice(s![.., FEATURE_DIM..]).to_owned();
        (0..HEADS)
            .map(|h| {
                let wk = random_matrix(&format!("toy-wk:{}:{h}", self.layer), FEATURE_DIM, HEAD_DIM);
                HeadKv {
                    keys: feats.dot(&wk),
                    values: ident.clone(),
                }
            })
            .collect()
    }
}

/// Toy noise predictor with five cross-attention layers at latent
/// resolutions 1, 1/2, 1/4, 1/2, 1 (down, down, mid, up, up).
pub struct ToyDenoiser {
    world: Arc<ToyWorld>,
    schedule: Schedule,
    name: String,
}

impl ToyDenoiser {
    pub fn new(world: Arc<ToyWorld>, schedule: Schedule) -> Self {
        Self {
            world,
            schedule,
            name: "toy-denoiser".into(),
        }
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    fn background(&self, shape: (usize, usize, usize)) -> Latent {
        match &self.world.background {
            Some(b) if b.shape() == shape => b.clone(),
            _ => Latent::zeros(shape.0, shape.1, shape.2),
        }
    }
}

fn cell_of(i: usize, from: usize, to: usize) -> usize {
    i * to / from
}

impl Denoiser for ToyDenoiser {
    fn name(&self) -> &str {
        &self.name
    }

    fn attention_layers(&self, latent_h: usize, latent_w: usize) -> Vec<LayerInfo> {
        let plan = [
            (1, BlockPosition::Down),
            (2, BlockPosition::Down),
            (4, BlockPosition::Mid),
            (2, BlockPosition::Up),
            (1, BlockPosition::Up),
        ];
        plan.iter()
            .enumerate()
            .map(|(index, &(scale, block))| LayerInfo {
                index,
                height: latent_h.div_ceil(scale),
                width: latent_w.div_ceil(scale),
                heads: HEADS,
                block,
            })
            .collect()
    }

    fn predict_noise(
        &self,
        x_t: &Latent,
        t: usize,
        text: &TokenEmbeddings,
        inpaint: Option<&InpaintConditioning>,
        attention: &dyn CrossAttention,
    ) -> Result<Latent, BackendError> {
        let (ch, lh, lw) = x_t.shape();
        if let Some(cond) = inpaint {
            // The toy reads only the latent; conditioning is shape-checked.
            if cond.masked_image.shape() != x_t.shape() || cond.mask.dims() != (lh, lw) {
                return Err(BackendError::Shape(
                    "inpaint conditioning does not match the latent".into(),
                ));
            }
        }
        let n_id = text.embeddings.ncols().saturating_sub(FEATURE_DIM);
        let x = x_t.as_array();
        let mut routed = Array2::<f64>::zeros((lh * lw, n_id));

        for layer in self.attention_layers(lh, lw) {
            let (h, w) = (layer.height, layer.width);
            let mut pooled = Array2::<f64>::zeros((h * w, ch));
            let mut counts = vec![0usize; h * w];
            for r in 0..lh {
                for c in 0..lw {
                    let cell = cell_of(r, lh, h) * w + cell_of(c, lw, w);
                    counts[cell] += 1;
                    for k in 0..ch {
                        pooled[(cell, k)] += x[(k, r, c)];
                    }
                }
            }
            for (cell, &n) in counts.iter().enumerate() {
                if n > 0 {
                    pooled.row_mut(cell).mapv_inplace(|v| v / n as f64);
                }
            }
            let scale = 2.0 / (ch as f64).sqrt();
            let queries: Vec<Matrix> = (0..HEADS)
                .map(|hd| {
                    let wq = random_matrix(&format!("toy-wq:{}:{hd}:{ch}", layer.index), ch, HEAD_DIM);
                    pooled.dot(&wq) * scale
                })
                .collect();
            let outs = attention.attend(
                &layer,
                &queries,
                text,
                &ToyProjector { layer: layer.index },
            )?;
            for out in &outs {
                if out.dim() != (h * w, n_id) {
                    return Err(BackendError::Shape(format!(
                        "attention output {:?}, expected {:?}",
                        out.dim(),
                        (h * w, n_id)
                    )));
                }
            }
            for r in 0..lh {
                for c in 0..lw {
                    let cell = cell_of(r, lh, h) * w + cell_of(c, lw, w);
                    let mut row = routed.row_mut(r * lw + c);
                    for out in &outs {
                        row += &out.row(cell);
                    }
                }
            }
        }

        let background = self.background(x_t.shape());
        let mut target = Array3::<f64>::zeros((ch, lh, lw));
        for r in 0..lh {
            for c in 0..lw {
                let weights = routed.row(r * lw + c);
                let total: f64 = weights.sum();
                if total > 1e-12 {
                    for (id, &wgt) in weights.iter().enumerate() {
                        if wgt == 0.0 {
                            continue;
                        }
                        if id >= self.world.len() {
                            return Err(BackendError::Shape(format!(
                                "prompt identity {id} outside the toy world"
                            )));
                        }
                        let tgt = self.world.target_at(id);
                        if tgt.shape() != x_t.shape() {
                            return Err(BackendError::Shape(format!(
                                "toy target {:?} vs latent {:?}",
                                tgt.shape(),
                                x_t.shape()
                            )));
                        }
                        let share = wgt / total;
                        for k in 0..ch {
                            target[(k, r, c)] += share * tgt.as_array()[(k, r, c)];
                        }
                    }
                } else {
                    for k in 0..ch {
                        target[(k, r, c)] = background.as_array()[(k, r, c)];
                    }
                }
            }
        }
        noise_towards(x_t, &Latent::from_array(target)?, t, &self.schedule)
    }
}

/// Pixel-unshuffle codec: each `f × f × 3` pixel block becomes `3f²`
/// channels of one latent pixel. Exact and linear; `f = 1` is the identity.
#[derive(Debug, Clone, Copy)]
pub struct ToyCodec {
    factor: usize,
}

impl ToyCodec {
    pub fn new(factor: usize) -> Self {
        assert!(factor >= 1, "codec factor must be >= 1");
        Self { factor }
    }

    pub fn identity() -> Self {
        Self::new(1)
    }
}

impl LatentCodec for ToyCodec {
    fn name(&self) -> &str {
        "toy-codec"
    }

    fn downscale(&self) -> usize {
        self.factor
    }

    fn latent_channels(&self) -> usize {
        3 * self.factor * self.factor
    }

    fn encode(&self, image: &Image) -> Result<Latent, BackendError> {
        let f = self.factor;
        let (h, w) = image.dims();
        if h % f != 0 || w % f != 0 {
            return Err(BackendError::Shape(format!(
                "image {h}x{w} is not divisible by codec factor {f}"
            )));
        }
        let px = image.as_array();
        Ok(Latent::from_fn(3 * f * f, h / f, w / f, |(ch, r, c)| {
            let (k, dy, dx) = (ch / (f * f), (ch / f) % f, ch % f);
            px[(r * f + dy, c * f + dx, k)]
        })?)
    }

    fn decode(&self, latent: &Latent) -> Result<Image, BackendError> {
        let f = self.factor;
        let (ch, lh, lw) = latent.shape();
        if ch != 3 * f * f {
            return Err(BackendError::Shape(format!(
                "latent has {ch} channels, codec expects {}",
                3 * f * f
            )));
        }
        let l = latent.as_array();
        Ok(Image::from_array(Array3::from_shape_fn(
            (lh * f, lw * f, 3),
            |(y, x, k)| l[(k * f * f + (y % f) * f + x % f, y / f, x / f)],
        ))?)
    }
}

/// The full toy/mock backend set.
pub fn toy_backends(world: Arc<ToyWorld>, schedule: Schedule, settings: &ToySettings) -> BackendSet {
    BackendSet {
        denoiser: Arc::new(ToyDenoiser::new(world.clone(), schedule.clone())),
        inpaint_denoiser: Arc::new(
            ToyDenoiser::new(world.clone(), schedule).named("toy-inpaint-denoiser"),
        ),
        text_encoder: Arc::new(ToyTextEncoder::new(world)),
        latent_codec: Arc::new(ToyCodec::new(settings.codec_factor)),
        segmenter: Arc::new(mock::BrightnessSegmenter::new(settings.segmenter_threshold)),
        embedder: Arc::new(mock::HashEmbedder::new(settings.embedding_dim)),
    }
}
