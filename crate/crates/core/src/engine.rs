//! End-to-end runs and on-disk job artifacts.
//!
//! ```text
//! <job>/layout.json
//! <job>/config.toml
//! <job>/objects/<id>/{image.png, latent.bin, refined_mask.png, meta.json}
//! <job>/scene.png
//! <job>/scene_latent.bin
//! <job>/provenance.json
//! ```
//!
//! `latent.bin` is the exact stage-1 latent; stage-1 images are re-decoded
//! from it when a job is reused, so PNG quantisation never leaks into
//! composition.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{AdapterLayer, BackendSet, BundledAdapters, Concurrency, ToyCodec, ToyWorld};
use crate::cc::{compose_scene_traced, CcTrace, SceneResult};
use crate::config::EngineConfig;
use crate::diffusion::Schedule;
use crate::error::{PipelineError, Stage};
use crate::layout::{bbox, load_layout_file, save_layout, BBox, BinaryMask, Layout};
use crate::segmentation::refine_mask;
use crate::sog::{generate_object, latent_dims, latent_mask, ObjectResult};
use crate::tensor::Latent;

/// Progress notifications from a run.
#[derive(Debug, Clone, PartialEq)]
pub enum Progress {
    Stage(Stage),
    ObjectDone(String),
}

pub type ProgressSink<'a> = &'a (dyn Fn(Progress) + Sync);

fn no_progress(_: Progress) {}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub objects: Vec<ObjectResult>,
    pub scene: SceneResult,
}

/// Per-object sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectMeta {
    pub id: String,
    pub prompt: String,
    pub seed: u64,
    pub bbox: [usize; 4],
    pub backends: std::collections::BTreeMap<String, String>,
}

pub struct Engine {
    config: EngineConfig,
    schedule: Schedule,
    adapters: Arc<dyn AdapterLayer>,
    pool: Arc<rayon::ThreadPool>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine").field("config", &self.config).finish()
    }
}

/// Every prompt a layout needs encoded: the empty unconditional prompt,
/// object prompts, the global prompt, and the background negative prompt.
pub fn scene_prompts(layout: &Layout, separator: &str) -> Vec<String> {
    let mut out = vec![String::new()];
    out.extend(layout.objects.iter().map(|o| o.prompt.clone()));
    out.push(layout.global_prompt.clone());
    out.push(
        layout
            .objects
            .iter()
            .map(|o| o.prompt.as_str())
            .collect::<Vec<_>>()
            .join(separator),
    );
    out
}

impl Engine {
    pub fn new(config: EngineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let schedule = config.schedule.build()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.worker_count())
            .build()
            .map_err(|e| PipelineError::Config(format!("worker pool: {e}")))?;
        Ok(Self {
            config,
            schedule,
            adapters: Arc::new(BundledAdapters),
            pool: Arc::new(pool),
        })
    }

    /// Loads the config stored in a job directory.
    pub fn from_job(job_dir: &Path) -> Result<Self, PipelineError> {
        Self::new(EngineConfig::load(Some(&job_dir.join("config.toml")), &[])?)
    }

    pub fn with_adapters(mut self, adapters: Arc<dyn AdapterLayer>) -> Self {
        self.adapters = adapters;
        self
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    /// Resolves backends for `layout`. Toy backends get a procedural world
    /// covering every prompt of the layout.
    pub fn backends_for(&self, layout: &Layout) -> Result<BackendSet, PipelineError> {
        let codec = ToyCodec::new(self.config.toy.codec_factor.max(1));
        let prompts = scene_prompts(layout, &self.config.cc.regca_separator);
        let world = ToyWorld::procedural(
            prompts.iter().map(String::as_str),
            layout.canvas_height,
            layout.canvas_width,
            &codec,
        )
        .map_err(|e| PipelineError::backend(Stage::Config, None, e))?;
        self.adapters
            .resolve(&self.config.backends, &self.config.toy, Arc::new(world), &self.schedule)
            .map_err(|e| PipelineError::backend(Stage::Config, None, e))
    }

    fn check_canvas(&self, layout: &Layout, backends: &BackendSet) -> Result<(), PipelineError> {
        latent_dims(backends, layout.canvas_height, layout.canvas_width)
            .map(|_| ())
            .map_err(PipelineError::Config)
    }

    /// Stage 1 and mask refinement for the objects at `indices`, in that
    /// order. Runs concurrently when every backend allows it.
    pub fn generate_objects(
        &self,
        layout: &Layout,
        backends: &BackendSet,
        indices: &[usize],
        progress: ProgressSink<'_>,
    ) -> Result<Vec<ObjectResult>, PipelineError> {
        let one = |&i: &usize| -> Result<ObjectResult, PipelineError> {
            let spec = &layout.objects[i];
            let mut r = generate_object(spec, &self.config.sog, &self.schedule, backends)?;
            r.refined_mask = Some(refine_mask(
                &r.image,
                &r.original_mask,
                backends.segmenter.as_ref(),
                &r.object_id,
            )?);
            progress(Progress::ObjectDone(spec.id.clone()));
            Ok(r)
        };
        match backends.concurrency() {
            Concurrency::Concurrent => self
                .pool
                .install(|| indices.par_iter().map(one).collect()),
            Concurrency::Serialized => indices.iter().map(one).collect(),
        }
    }

    /// Runs both stages in memory.
    /// Input checks that need the config: every mask is non-empty and the
    /// canvas tiles into whole latent cells.
    pub fn preflight(&self, layout: &Layout) -> Result<(), PipelineError> {
        layout.validate()?;
        if let Some(o) = layout.objects.iter().find(|o| o.mask.is_empty()) {
            return Err(PipelineError::EmptyMask {
                stage: Stage::Layout,
                object: o.id.clone(),
            });
        }
        let f = self.config.toy.codec_factor;
        if !layout.canvas_height.is_multiple_of(f) || !layout.canvas_width.is_multiple_of(f) {
            return Err(PipelineError::Config(format!(
                "canvas {}x{} is not divisible by toy.codec_factor {f}",
                layout.canvas_height, layout.canvas_width
            )));
        }
        Ok(())
    }

    pub fn run(&self, layout: &Layout, progress: ProgressSink<'_>) -> Result<RunOutput, PipelineError> {
        self.preflight(layout)?;
        let backends = self.backends_for(layout)?;
        self.check_canvas(layout, &backends)?;
        progress(Progress::Stage(Stage::Sog));
        let all: Vec<usize> = (0..layout.objects.len()).collect();
        let objects = self.generate_objects(layout, &backends, &all, progress)?;
        self.compose(layout, &backends, objects, progress, None)
    }

    fn compose(
        &self,
        layout: &Layout,
        backends: &BackendSet,
        objects: Vec<ObjectResult>,
        progress: ProgressSink<'_>,
        trace: Option<&mut CcTrace>,
    ) -> Result<RunOutput, PipelineError> {
        progress(Progress::Stage(Stage::Cc));
        let mut scene = compose_scene_traced(
            &objects,
            layout,
            &self.config.cc,
            &self.schedule,
            backends,
            self.config.seed,
            trace,
        )?;
        scene.provenance.config = serde_json::to_value(&self.config).expect("config serializes");
        Ok(RunOutput { objects, scene })
    }

    /// Full run writing a job directory.
    pub fn run_job(
        &self,
        layout: &Layout,
        job_dir: &Path,
        progress: Option<ProgressSink<'_>>,
    ) -> Result<RunOutput, PipelineError> {
        let progress = progress.unwrap_or(&no_progress);
        let out = self.run(layout, progress)?;
        self.write_job(job_dir, layout, &out, &[])?;
        Ok(out)
    }

    /// New job from `from`: object `object_id` is regenerated (with `seed`
    /// if given), the other objects' stage-1 artifacts are copied verbatim,
    /// and composition re-runs. Uses this engine's config, which should be
    /// the one stored in `from` (see [`Engine::from_job`]).
    pub fn regenerate_job(
        &self,
        from: &Path,
        object_id: &str,
        seed: Option<u64>,
        job_dir: &Path,
        progress: Option<ProgressSink<'_>>,
    ) -> Result<RunOutput, PipelineError> {
        let progress = progress.unwrap_or(&no_progress);
        let mut layout = load_layout_file(&from.join("layout.json"))?;
        let index = layout
            .objects
            .iter()
            .position(|o| o.id == object_id)
            .ok_or_else(|| PipelineError::NotFound(format!("object {object_id:?} is not in the layout")))?;
        if let Some(s) = seed {
            layout.objects[index].seed = s;
        }
        self.preflight(&layout)?;
        let backends = self.backends_for(&layout)?;
        self.check_canvas(&layout, &backends)?;
        progress(Progress::Stage(Stage::Sog));
        let mut fresh = self.generate_objects(&layout, &backends, &[index], progress)?;
        let mut objects = Vec::with_capacity(layout.objects.len());
        for (i, spec) in layout.objects.iter().enumerate() {
            if i == index {
                objects.push(fresh.remove(0));
            } else {
                objects.push(read_object(from, spec, &backends)?);
            }
        }
        let out = self.compose(&layout, &backends, objects, progress, None)?;
        let keep: Vec<(String, PathBuf)> = layout
            .objects
            .iter()
            .filter(|o| o.id != object_id)
            .map(|o| (o.id.clone(), from.join("objects").join(&o.id)))
            .collect();
        self.write_job(job_dir, &layout, &out, &keep)?;
        Ok(out)
    }

    /// Re-runs composition on the stage-1 artifacts of `from` with this
    /// engine's config.
    pub fn compose_job(
        &self,
        from: &Path,
        job_dir: &Path,
        trace: Option<&mut CcTrace>,
    ) -> Result<RunOutput, PipelineError> {
        let layout = load_layout_file(&from.join("layout.json"))?;
        let backends = self.backends_for(&layout)?;
        self.check_canvas(&layout, &backends)?;
        let objects = layout
            .objects
            .iter()
            .map(|spec| read_object(from, spec, &backends))
            .collect::<Result<Vec<_>, _>>()?;
        let out = self.compose(&layout, &backends, objects, &no_progress, trace)?;
        let keep: Vec<(String, PathBuf)> = layout
            .objects
            .iter()
            .map(|o| (o.id.clone(), from.join("objects").join(&o.id)))
            .collect();
        self.write_job(job_dir, &layout, &out, &keep)?;
        Ok(out)
    }

    fn write_job(
        &self,
        job_dir: &Path,
        layout: &Layout,
        out: &RunOutput,
        copied: &[(String, PathBuf)],
    ) -> Result<(), PipelineError> {
        let io = |p: &Path| {
            let p = p.to_path_buf();
            move |e| PipelineError::io(&p, e)
        };
        fs::create_dir_all(job_dir.join("objects")).map_err(io(job_dir))?;
        write(&job_dir.join("layout.json"), &save_layout(layout))?;
        write(&job_dir.join("config.toml"), self.config.to_toml().as_bytes())?;
        let identifiers = out.scene.provenance.backends.clone();
        for r in &out.objects {
            let dir = job_dir.join("objects").join(&r.object_id);
            fs::create_dir_all(&dir).map_err(io(&dir))?;
            if let Some((_, src)) = copied.iter().find(|(id, _)| *id == r.object_id) {
                for entry in fs::read_dir(src).map_err(io(src))? {
                    let entry = entry.map_err(io(src))?;
                    let target = dir.join(entry.file_name());
                    fs::copy(entry.path(), &target).map_err(io(&target))?;
                }
                continue;
            }
            let spec = layout.object(&r.object_id).expect("result ids come from the layout");
            write(&dir.join("latent.bin"), &r.latent_x0.to_bytes())?;
            r.image
                .save_png(&dir.join("image.png"))
                .map_err(|e| PipelineError::Tensor { stage: Stage::Io, source: e })?;
            r.effective_mask()
                .save_png(&dir.join("refined_mask.png"))
                .map_err(PipelineError::Layout)?;
            let meta = ObjectMeta {
                id: r.object_id.clone(),
                prompt: spec.prompt.clone(),
                seed: r.seed,
                bbox: r.bbox.as_xywh(),
                backends: identifiers.clone(),
            };
            write(&dir.join("meta.json"), &serde_json::to_vec_pretty(&meta).expect("meta serializes"))?;
        }
        out.scene
            .image
            .save_png(&job_dir.join("scene.png"))
            .map_err(|e| PipelineError::Tensor { stage: Stage::Io, source: e })?;
        write(&job_dir.join("scene_latent.bin"), &out.scene.latent.to_bytes())?;
        write(
            &job_dir.join("provenance.json"),
            &serde_json::to_vec_pretty(&out.scene.provenance).expect("provenance serializes"),
        )?;
        Ok(())
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    fs::write(path, bytes).map_err(|e| PipelineError::io(path, e))
}

/// Rebuilds a stage-1 result from a job directory.
pub fn read_object(job_dir: &Path, spec: &crate::layout::ObjectSpec, backends: &BackendSet) -> Result<ObjectResult, PipelineError> {
    let dir = job_dir.join("objects").join(&spec.id);
    let path = dir.join("latent.bin");
    let bytes = fs::read(&path).map_err(|e| PipelineError::io(&path, e))?;
    let latent = Latent::from_bytes(&bytes).map_err(|e| PipelineError::Tensor { stage: Stage::Io, source: e })?;
    let image = backends
        .latent_codec
        .decode(&latent)
        .map_err(|e| PipelineError::backend(Stage::Io, Some(&spec.id), e))?;
    let refined = BinaryMask::load_png(&dir.join("refined_mask.png"))?;
    let bx: BBox = bbox(&spec.mask).map_err(|_| PipelineError::EmptyMask {
        stage: Stage::Io,
        object: spec.id.clone(),
    })?;
    let (_, lh, lw) = latent.shape();
    Ok(ObjectResult {
        object_id: spec.id.clone(),
        seed: spec.seed,
        image,
        latent_mask: latent_mask(&spec.mask, lh, lw),
        latent_x0: latent,
        original_mask: spec.mask.clone(),
        refined_mask: Some(refined),
        bbox: bx,
    })
}

/// A fresh job id.
pub fn new_job_id() -> String {
    uuid::Uuid::new_v4().simple().to_string()
}
