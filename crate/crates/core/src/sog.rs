//! Single-object generation.
//!
//! Each object is generated alone on a flat background: the latent starts as
//! noise inside the object mask and the noised flat-background latent outside
//! it, PACA steers the conditional branch, and after every DDIM step the
//! outside region is reset to the flat-background trajectory.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::PlainAttention;
use crate::backends::{check_prediction, BackendSet};
use crate::diffusion::{
    blend_background, compose_starting_latent, ddim_step, flat_latent, forward_noise,
    plan_timesteps, predict_x0, Schedule, TimestepPlan,
};
use crate::error::{PipelineError, Stage};
use crate::layout::{bbox, downsample_mask, BBox, BinaryMask, ObjectSpec};
use crate::paca::{noise_signal_ratio, AttentionRecorder, AttentionSnapshot, PacaAttention, PacaMasks, PacaSettings};
use crate::tensor::{Image, Latent};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SogConfig {
    pub t_start: usize,
    pub num_steps: usize,
    pub guidance_scale: f64,
    pub paca: PacaSettings,
    /// RGB in `[-1, 1]`; black by default.
    pub flat_color: [f64; 3],
}

impl Default for SogConfig {
    fn default() -> Self {
        Self {
            t_start: 800,
            num_steps: 40,
            guidance_scale: 7.5,
            paca: PacaSettings::default(),
            flat_color: [-1.0; 3],
        }
    }
}

impl SogConfig {
    pub fn validate(&self, train_steps: usize) -> Result<(), String> {
        if self.t_start == 0 || self.t_start > train_steps {
            return Err(format!(
                "sog.t_start must be in 1..={train_steps}, got {}",
                self.t_start
            ));
        }
        if self.num_steps == 0 {
            return Err("sog.num_steps must be >= 1".into());
        }
        if !self.guidance_scale.is_finite() {
            return Err("sog.guidance_scale must be finite".into());
        }
        if self.flat_color.iter().any(|c| !(-1.0..=1.0).contains(c)) {
            return Err("sog.flat_color components must lie in [-1, 1]".into());
        }
        self.paca.validate()
    }

    pub fn plan(&self, schedule: &Schedule) -> Result<TimestepPlan, PipelineError> {
        plan_timesteps(self.num_steps, schedule.train_steps(), self.t_start)
            .map_err(|e| PipelineError::diffusion(Stage::Sog, None, e))
    }
}

/// Stage-1 output for one object.
#[derive(Debug, Clone)]
pub struct ObjectResult {
    pub object_id: String,
    pub seed: u64,
    pub image: Image,
    pub latent_x0: Latent,
    pub original_mask: BinaryMask,
    /// The object mask at latent resolution, as used for blending.
    pub latent_mask: BinaryMask,
    /// Set by the segmentation stage.
    pub refined_mask: Option<BinaryMask>,
    pub bbox: BBox,
}

impl ObjectResult {
    /// Refined mask if present, otherwise the original.
    pub fn effective_mask(&self) -> &BinaryMask {
        self.refined_mask.as_ref().unwrap_or(&self.original_mask)
    }
}

/// One DDIM step of a traced run.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub t: usize,
    pub t_prev: usize,
    /// Clean-latent prediction at `t` from the guided noise estimate.
    pub x0_pred: Latent,
    pub attention: Vec<AttentionSnapshot>,
}

/// Optional instrumentation of a generation.
#[derive(Debug, Default)]
pub struct SogTrace {
    pub record_attention: bool,
    pub steps: Vec<StepRecord>,
    pub conditional_calls: usize,
    pub unconditional_calls: usize,
}

/// Object mask at latent resolution. If the area rule drops a small object
/// entirely, every cell the mask touches is kept instead.
pub fn latent_mask(mask: &BinaryMask, latent_h: usize, latent_w: usize) -> BinaryMask {
    let small = downsample_mask(mask, latent_h, latent_w);
    if !small.is_empty() || mask.is_empty() {
        return small;
    }
    log::warn!("object mask vanishes at {latent_h}x{latent_w}; using any-coverage cells");
    let (h, w) = mask.dims();
    let mut out = BinaryMask::zeros(latent_h, latent_w).expect("non-empty latent dims");
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) {
                out.set(r * latent_h / h, c * latent_w / w, true);
            }
        }
    }
    out
}

/// Latent dimensions of a canvas under the configured codec.
pub(crate) fn latent_dims(
    backends: &BackendSet,
    height: usize,
    width: usize,
) -> Result<(usize, usize, usize), String> {
    let f = backends.latent_codec.downscale();
    if f == 0 || !height.is_multiple_of(f) || !width.is_multiple_of(f) {
        return Err(format!(
            "canvas {height}x{width} is not divisible by the codec downscale factor {f}"
        ));
    }
    Ok((backends.latent_codec.latent_channels(), height / f, width / f))
}

/// Classifier-free guidance: `ε_u + g·(ε_c − ε_u)`.
pub fn guided_noise(eps_cond: &Latent, eps_uncond: &Latent, scale: f64) -> Result<Latent, crate::tensor::TensorError> {
    let diff = eps_cond.axpby(1.0, eps_uncond, -1.0)?;
    eps_uncond.axpby(1.0, &diff, scale)
}

pub fn generate_object(
    spec: &ObjectSpec,
    cfg: &SogConfig,
    schedule: &Schedule,
    backends: &BackendSet,
) -> Result<ObjectResult, PipelineError> {
    generate_object_traced(spec, cfg, schedule, backends, None)
}

pub fn generate_object_traced(
    spec: &ObjectSpec,
    cfg: &SogConfig,
    schedule: &Schedule,
    backends: &BackendSet,
    mut trace: Option<&mut SogTrace>,
) -> Result<ObjectResult, PipelineError> {
    let oid = Some(spec.id.as_str());
    let backend_err = |e| PipelineError::backend(Stage::Sog, oid, e);
    let diff_err = |e| PipelineError::diffusion(Stage::Sog, oid, e);

    cfg.validate(schedule.train_steps())
        .map_err(PipelineError::Config)?;
    let obj_bbox = bbox(&spec.mask).map_err(|_| PipelineError::EmptyMask {
        stage: Stage::Sog,
        object: spec.id.clone(),
    })?;
    let (h, w) = spec.mask.dims();
    let (ch, lh, lw) = latent_dims(backends, h, w).map_err(PipelineError::Config)?;
    let mask_lat = latent_mask(&spec.mask, lh, lw);
    let plan = cfg.plan(schedule)?;

    let flat = Image::constant(h, w, cfg.flat_color);
    let flat_code = backends.latent_codec.encode(&flat).map_err(backend_err)?;
    if flat_code.shape() != (ch, lh, lw) {
        return Err(backend_err(crate::backends::BackendError::Contract(format!(
            "codec produced {:?}, expected {:?}",
            flat_code.shape(),
            (ch, lh, lw)
        ))));
    }

    // Draw order is part of the reproducibility contract: flat eps, then
    // object eps.
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let eps_flat = Latent::randn(ch, lh, lw, &mut rng);
    let eps_obj = Latent::randn(ch, lh, lw, &mut rng);

    let x_flat = flat_latent(&flat_code, plan.t_start(), &eps_flat, schedule).map_err(diff_err)?;
    let mut x = compose_starting_latent(&x_flat, &mask_lat, &eps_obj).map_err(diff_err)?;

    let text_c = backends.encode_text(&spec.prompt).map_err(backend_err)?;
    let text_u = backends.encode_text("").map_err(backend_err)?;
    let layers = backends.denoiser.attention_layers(lh, lw);
    let paca_masks = PacaMasks::new(&spec.mask, &layers);
    let recorder = AttentionRecorder::default();

    for (t, t_prev) in plan.pairs() {
        let sigma = noise_signal_ratio(t, schedule);
        let mut paca = PacaAttention::new(&paca_masks, cfg.paca, sigma);
        let recording = trace.as_ref().is_some_and(|tr| tr.record_attention);
        if recording {
            paca = paca.with_recorder(&recorder);
        }
        let eps_c = backends
            .denoiser
            .predict_noise(&x, t, &text_c, None, &paca)
            .map_err(backend_err)?;
        check_prediction(&x, &eps_c).map_err(backend_err)?;
        let eps_u = backends
            .denoiser
            .predict_noise(&x, t, &text_u, None, &PlainAttention)
            .map_err(backend_err)?;
        check_prediction(&x, &eps_u).map_err(backend_err)?;
        let eps = guided_noise(&eps_c, &eps_u, cfg.guidance_scale).map_err(|e| PipelineError::Tensor {
            stage: Stage::Sog,
            source: e,
        })?;

        if let Some(tr) = trace.as_deref_mut() {
            tr.conditional_calls += 1;
            tr.unconditional_calls += 1;
            tr.steps.push(StepRecord {
                t,
                t_prev,
                x0_pred: predict_x0(&x, &eps, t, schedule).map_err(diff_err)?,
                attention: if recording { recorder.take() } else { Vec::new() },
            });
        }

        let stepped = ddim_step(&x, &eps, t, t_prev, schedule).map_err(diff_err)?;
        let flat_t = forward_noise(&flat_code, t_prev, &eps_flat, schedule).map_err(diff_err)?;
        x = blend_background(&stepped, &flat_t, &mask_lat).map_err(diff_err)?;
    }

    let image = backends.latent_codec.decode(&x).map_err(backend_err)?;
    Ok(ObjectResult {
        object_id: spec.id.clone(),
        seed: spec.seed,
        image,
        latent_x0: x,
        original_mask: spec.mask.clone(),
        latent_mask: mask_lat,
        refined_mask: None,
        bbox: obj_bbox,
    })
}
