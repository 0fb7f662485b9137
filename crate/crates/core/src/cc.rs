//! Comprehensive composition: inpaint the background around the generated
//! objects with region-grouped cross-attention.
//!
//! The known region (the objects) is anchored: the starting latent holds the
//! forward-noised known latent there, and after every step whose source
//! timestep is above `t_min` it is replaced by the known latent noised to the
//! new timestep. Below `t_min` the whole image evolves freely and the
//! inpainting mask covers everything.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{check_prediction, BackendSet, InpaintConditioning};
use crate::diffusion::{ddim_step, forward_noise, plan_timesteps, Schedule, TimestepPlan, DiffusionError};
use crate::error::{PipelineError, Stage};
use crate::layout::{background_mask, BBox, BinaryMask, Layout};
use crate::regca::{build_group_prompts, RegcaAttention};
use crate::segmentation::{compose_known, CompositeKnown};
use crate::sog::{guided_noise, latent_dims, latent_mask, ObjectResult};
use crate::tensor::{Image, Latent};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CcConfig {
    pub t_start: usize,
    pub t_min: usize,
    pub num_steps: usize,
    pub guidance_scale: f64,
    /// Joins object prompts into the background's negative prompt.
    pub regca_separator: String,
}

impl Default for CcConfig {
    fn default() -> Self {
        Self {
            t_start: 800,
            t_min: 100,
            num_steps: 40,
            guidance_scale: 7.5,
            regca_separator: ", ".into(),
        }
    }
}

impl CcConfig {
    /// `t_min = 0` is accepted and disables the free refinement phase.
    pub fn validate(&self, train_steps: usize) -> Result<(), String> {
        if self.t_start == 0 || self.t_start > train_steps {
            return Err(format!(
                "cc.t_start must be in 1..={train_steps}, got {}",
                self.t_start
            ));
        }
        if self.t_min >= self.t_start {
            return Err(format!(
                "cc.t_min ({}) must be below cc.t_start ({})",
                self.t_min, self.t_start
            ));
        }
        if self.num_steps == 0 {
            return Err("cc.num_steps must be >= 1".into());
        }
        if !self.guidance_scale.is_finite() {
            return Err("cc.guidance_scale must be finite".into());
        }
        Ok(())
    }

    pub fn plan(&self, schedule: &Schedule) -> Result<TimestepPlan, PipelineError> {
        plan_timesteps(self.num_steps, schedule.train_steps(), self.t_start)
            .map_err(|e| PipelineError::diffusion(Stage::Cc, None, e))
    }

    /// Whether the known region is re-anchored after the step leaving `t`.
    pub fn anchors_after(&self, t: usize) -> bool {
        t > self.t_min
    }
}

/// Starting latent at `t_start`: the known latent noised with `eps1` where
/// `inpaint_mask` is 0, fresh noise `eps2` where it is 1. The anchor uses
/// `α_{t_start}`, the noise level of the latent being built.
pub fn init_inpaint_latent(
    known_code: &Latent,
    inpaint_mask: &BinaryMask,
    t_start: usize,
    schedule: &Schedule,
    eps1: &Latent,
    eps2: &Latent,
) -> Result<Latent, DiffusionError> {
    let anchored = forward_noise(known_code, t_start, eps1, schedule)?;
    Ok(Latent::select(inpaint_mask, eps2, &anchored)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectSeed {
    pub id: String,
    pub seed: u64,
}

/// Everything needed to reproduce a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub scene_seed: u64,
    pub object_seeds: Vec<ObjectSeed>,
    pub backends: BTreeMap<String, String>,
    pub timesteps: Vec<usize>,
    /// Config snapshot; the engine stores the full engine config here.
    pub config: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct SceneResult {
    pub image: Image,
    pub latent: Latent,
    pub per_object_bboxes: Vec<(String, BBox)>,
    pub composite: CompositeKnown,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CcStepRecord {
    pub t: usize,
    pub t_prev: usize,
    pub anchored: bool,
    pub full_mask: bool,
    pub latent: Latent,
}

#[derive(Debug, Default)]
pub struct CcTrace {
    pub steps: Vec<CcStepRecord>,
    pub conditional_calls: usize,
    pub unconditional_calls: usize,
}

pub fn compose_scene(
    results: &[ObjectResult],
    layout: &Layout,
    cfg: &CcConfig,
    schedule: &Schedule,
    backends: &BackendSet,
    scene_seed: u64,
) -> Result<SceneResult, PipelineError> {
    compose_scene_traced(results, layout, cfg, schedule, backends, scene_seed, None)
}

pub fn compose_scene_traced(
    results: &[ObjectResult],
    layout: &Layout,
    cfg: &CcConfig,
    schedule: &Schedule,
    backends: &BackendSet,
    scene_seed: u64,
    mut trace: Option<&mut CcTrace>,
) -> Result<SceneResult, PipelineError> {
    let backend_err = |e| PipelineError::backend(Stage::Cc, None, e);
    let diff_err = |e| PipelineError::diffusion(Stage::Cc, None, e);
    let tensor_err = |e| PipelineError::Tensor {
        stage: Stage::Cc,
        source: e,
    };

    cfg.validate(schedule.train_steps()).map_err(PipelineError::Config)?;
    if results.len() != layout.objects.len() {
        return Err(PipelineError::Config(format!(
            "{} object results for {} layout objects",
            results.len(),
            layout.objects.len()
        )));
    }
    for (r, o) in results.iter().zip(&layout.objects) {
        if r.object_id != o.id {
            return Err(PipelineError::Config(format!(
                "object results out of layout order: {:?} where {:?} expected",
                r.object_id, o.id
            )));
        }
    }
    let plan = cfg.plan(schedule)?;
    let composite = compose_known(results)?;
    let (h, w) = composite.known_image.dims();
    let (ch, lh, lw) = latent_dims(backends, h, w).map_err(PipelineError::Config)?;

    let known_code = backends
        .latent_codec
        .encode(&composite.known_image)
        .map_err(backend_err)?;
    let small: Vec<BinaryMask> = composite
        .refined_masks
        .iter()
        .map(|m| latent_mask(m, lh, lw))
        .collect();
    let inpaint_lat = background_mask(&small)?;
    let everything = BinaryMask::ones(lh, lw)?;

    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
    let eps1 = Latent::randn(ch, lh, lw, &mut rng);
    let eps2 = Latent::randn(ch, lh, lw, &mut rng);
    let mut x = init_inpaint_latent(&known_code, &inpaint_lat, plan.t_start(), schedule, &eps1, &eps2)
        .map_err(diff_err)?;

    let prompts: Vec<&str> = layout.objects.iter().map(|o| o.prompt.as_str()).collect();
    let groups = build_group_prompts(&prompts, &layout.global_prompt, &cfg.regca_separator);
    let encode_all = |texts: &[String]| {
        texts
            .iter()
            .map(|t| backends.encode_text(t))
            .collect::<Result<Vec<_>, _>>()
    };
    let cond_texts = encode_all(&groups.conditional).map_err(backend_err)?;
    let uncond_texts = encode_all(&groups.unconditional).map_err(backend_err)?;
    let cond_bg = cond_texts.last().cloned().expect("background group");
    let uncond_bg = uncond_texts.last().cloned().expect("background group");
    let regca_cond = RegcaAttention::new(cond_texts, composite.refined_masks.clone())
        .map_err(|e| backend_err(e.into()))?;
    let regca_uncond = RegcaAttention::new(uncond_texts, composite.refined_masks.clone())
        .map_err(|e| backend_err(e.into()))?;

    let anchored_cond = InpaintConditioning {
        masked_image: known_code.clone(),
        mask: inpaint_lat.clone(),
    };
    let free_cond = InpaintConditioning {
        masked_image: backends
            .latent_codec
            .encode(&Image::zeros(h, w))
            .map_err(backend_err)?,
        mask: everything,
    };

    for (t, t_prev) in plan.pairs() {
        let full = !cfg.anchors_after(t);
        let conditioning = if full { &free_cond } else { &anchored_cond };
        let eps_c = backends
            .inpaint_denoiser
            .predict_noise(&x, t, &cond_bg, Some(conditioning), &regca_cond)
            .map_err(backend_err)?;
        check_prediction(&x, &eps_c).map_err(backend_err)?;
        let eps_u = backends
            .inpaint_denoiser
            .predict_noise(&x, t, &uncond_bg, Some(conditioning), &regca_uncond)
            .map_err(backend_err)?;
        check_prediction(&x, &eps_u).map_err(backend_err)?;
        let eps = guided_noise(&eps_c, &eps_u, cfg.guidance_scale).map_err(tensor_err)?;

        x = ddim_step(&x, &eps, t, t_prev, schedule).map_err(diff_err)?;
        if !full {
            let known_t = forward_noise(&known_code, t_prev, &eps1, schedule).map_err(diff_err)?;
            x = Latent::select(&inpaint_lat, &x, &known_t).map_err(tensor_err)?;
        }
        if let Some(tr) = trace.as_deref_mut() {
            tr.conditional_calls += 1;
            tr.unconditional_calls += 1;
            tr.steps.push(CcStepRecord {
                t,
                t_prev,
                anchored: !full,
                full_mask: full,
                latent: x.clone(),
            });
        }
    }

    let image = backends.latent_codec.decode(&x).map_err(backend_err)?;
    Ok(SceneResult {
        image,
        latent: x,
        per_object_bboxes: results
            .iter()
            .map(|r| (r.object_id.clone(), r.bbox))
            .collect(),
        composite,
        provenance: Provenance {
            scene_seed,
            object_seeds: results
                .iter()
                .map(|r| ObjectSeed {
                    id: r.object_id.clone(),
                    seed: r.seed,
                })
                .collect(),
            backends: backends.identifiers(),
            timesteps: plan.steps().to_vec(),
            config: serde_json::json!({ "cc": cfg }),
        },
    })
}
