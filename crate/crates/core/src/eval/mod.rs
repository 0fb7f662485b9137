//! Local CLIP score, local IoU, and the evaluation report.

pub mod coco;

use serde::{Deserialize, Serialize};

use crate::backends::{check_unit, ImageTextEmbedder, Segmenter};
use crate::error::{PipelineError, Stage};
use crate::layout::{bbox, BBox, BinaryMask, Layout};
use crate::segmentation::best_candidate;
use crate::tensor::Image;

pub use coco::{prepare_layouts, CocoLayout, PrepareOptions};

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// `max(100·cos, 0)`.
pub fn clip_term(image_embedding: &[f64], text_embedding: &[f64]) -> f64 {
    (100.0 * cosine(image_embedding, text_embedding)).max(0.0)
}

/// Intersection over union; two empty masks score 0.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    if a.dims() != b.dims() {
        return 0.0;
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.iter().zip(b.iter()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn check_canvas(image: &Image, layout: &Layout) -> Result<(), PipelineError> {
    if image.dims() != (layout.canvas_height, layout.canvas_width) {
        return Err(PipelineError::Config(format!(
            "image {:?} does not match canvas {}x{}",
            image.dims(),
            layout.canvas_height,
            layout.canvas_width
        )));
    }
    Ok(())
}

fn object_box(layout: &Layout, i: usize) -> Result<BBox, PipelineError> {
    let o = &layout.objects[i];
    bbox(&o.mask).map_err(|_| PipelineError::EmptyMask {
        stage: Stage::Eval,
        object: o.id.clone(),
    })
}

/// Per-object CLIP terms on bounding-box crops.
pub fn local_clip_terms(
    image: &Image,
    layout: &Layout,
    embedder: &dyn ImageTextEmbedder,
) -> Result<Vec<f64>, PipelineError> {
    check_canvas(image, layout)?;
    (0..layout.objects.len())
        .map(|i| {
            let o = &layout.objects[i];
            let crop = image.crop(&object_box(layout, i)?);
            let err = |e| PipelineError::backend(Stage::Eval, Some(&o.id), e);
            let ei = embedder.embed_image(&crop).map_err(err)?;
            let et = embedder.embed_text(&o.prompt).map_err(err)?;
            check_unit(&ei).and_then(|_| check_unit(&et)).map_err(err)?;
            Ok(clip_term(&ei, &et))
        })
        .collect()
}

pub fn local_clip_score(
    image: &Image,
    layout: &Layout,
    embedder: &dyn ImageTextEmbedder,
) -> Result<f64, PipelineError> {
    Ok(mean(&local_clip_terms(image, layout, embedder)?))
}

/// Per-object IoU of the raw best segmenter candidate against the layout
/// mask. A failing segmenter scores that object 0.
pub fn local_iou_terms(
    image: &Image,
    layout: &Layout,
    segmenter: &dyn Segmenter,
) -> Result<Vec<f64>, PipelineError> {
    check_canvas(image, layout)?;
    (0..layout.objects.len())
        .map(|i| {
            let o = &layout.objects[i];
            let bx = object_box(layout, i)?;
            Ok(match segmenter.segment(image, bx) {
                Ok(c) => match best_candidate(&c) {
                    Some(best) => iou(&best.mask, &o.mask),
                    None => {
                        log::warn!("object {}: segmenter returned nothing, IoU 0", o.id);
                        0.0
                    }
                },
                Err(e) => {
                    log::warn!("object {}: segmenter failed ({e}), IoU 0", o.id);
                    0.0
                }
            })
        })
        .collect()
}

pub fn local_iou(image: &Image, layout: &Layout, segmenter: &dyn Segmenter) -> Result<f64, PipelineError> {
    Ok(mean(&local_iou_terms(image, layout, segmenter)?))
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub layout: String,
    pub object_id: String,
    /// `[x, y, w, h]`.
    pub crop_box: [usize; 4],
    pub clip: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Assumptions of the protocol that the metric values depend on.
    pub protocol_notes: Vec<String>,
    pub clip_local: f64,
    pub iou_local: f64,
    pub n_layouts: usize,
    pub n_objects: usize,
    pub per_object: Vec<ObjectRecord>,
}

impl EvalReport {
    /// Means are taken over objects, pooled across layouts.
    pub fn from_records(protocol_notes: Vec<String>, n_layouts: usize, per_object: Vec<ObjectRecord>) -> Self {
        let clip: Vec<f64> = per_object.iter().map(|r| r.clip).collect();
        let iou: Vec<f64> = per_object.iter().map(|r| r.iou).collect();
        Self {
            protocol_notes,
            clip_local: mean(&clip),
            iou_local: mean(&iou),
            n_layouts,
            n_objects: per_object.len(),
            per_object,
        }
    }

    /// Scores one generated image against its layout.
    pub fn score_layout(
        name: &str,
        image: &Image,
        layout: &Layout,
        embedder: &dyn ImageTextEmbedder,
        segmenter: &dyn Segmenter,
    ) -> Result<Vec<ObjectRecord>, PipelineError> {
        let clip = local_clip_terms(image, layout, embedder)?;
        let ious = local_iou_terms(image, layout, segmenter)?;
        layout
            .objects
            .iter()
            .enumerate()
            .map(|(i, o)| {
                Ok(ObjectRecord {
                    layout: name.to_string(),
                    object_id: o.id.clone(),
                    crop_box: object_box(layout, i)?.as_xywh(),
                    clip: clip[i],
                    iou: ious[i],
                })
            })
            .collect()
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        for note in &self.protocol_notes {
            s.push_str(&format!("# {note}\n"));
        }
        s.push_str(&format!(
            "{:<12} {:>10}\n{:<12} {:>10.2}\n{:<12} {:>10.4}\n{:<12} {:>10}\n{:<12} {:>10}\n",
            "metric", "value", "CLIP(local)", self.clip_local, "IoU(local)", self.iou_local,
            "layouts", self.n_layouts, "objects", self.n_objects
        ));
        s
    }
}
