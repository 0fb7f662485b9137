//! Mask refinement and assembly of the composite known image.

use crate::backends::{ScoredMask, Segmenter};
use crate::error::{PipelineError, Stage};
use crate::layout::{background_mask, bbox, BinaryMask};
use crate::sog::ObjectResult;
use crate::tensor::Image;

/// Highest-scoring candidate; ties go to the earliest.
pub fn best_candidate(candidates: &[ScoredMask]) -> Option<&ScoredMask> {
    candidates
        .iter()
        .fold(None, |best: Option<&ScoredMask>, c| match best {
            Some(b) if b.score >= c.score => Some(b),
            _ => Some(c),
        })
}

/// Segments `image` with the box of `original_mask` as prompt and intersects
/// the best candidate with the original mask. Falls back to the original
/// mask (with a warning) when the segmenter fails, returns nothing, or the
/// intersection is empty.
pub fn refine_mask(
    image: &Image,
    original_mask: &BinaryMask,
    segmenter: &dyn Segmenter,
    object_id: &str,
) -> Result<BinaryMask, PipelineError> {
    let bx = bbox(original_mask).map_err(|_| PipelineError::EmptyMask {
        stage: Stage::Segmentation,
        object: object_id.to_string(),
    })?;
    if image.dims() != original_mask.dims() {
        return Err(PipelineError::Segmenter {
            stage: Stage::Segmentation,
            object: object_id.to_string(),
            message: format!(
                "image {:?} vs mask {:?}",
                image.dims(),
                original_mask.dims()
            ),
        });
    }
    let fallback = |why: &str| {
        log::warn!("object {object_id}: {why}; keeping the original mask");
        Ok(original_mask.clone())
    };
    let candidates = match segmenter.segment(image, bx) {
        Ok(c) => c,
        Err(e) => return fallback(&format!("segmenter failed ({e})")),
    };
    let Some(best) = best_candidate(&candidates) else {
        return fallback("segmenter returned no candidates");
    };
    match best.mask.and(original_mask) {
        Ok(refined) if !refined.is_empty() => Ok(refined),
        Ok(_) => fallback("refined mask is empty"),
        Err(e) => fallback(&format!("candidate has the wrong shape ({e})")),
    }
}

/// Refines every result in place.
pub fn refine_all(
    results: &mut [ObjectResult],
    segmenter: &dyn Segmenter,
) -> Result<(), PipelineError> {
    for r in results.iter_mut() {
        r.refined_mask = Some(refine_mask(&r.image, &r.original_mask, segmenter, &r.object_id)?);
    }
    Ok(())
}

/// Stage-2 input: `inpaint_mask` is 1 where the background must be
/// generated.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeKnown {
    pub known_image: Image,
    pub inpaint_mask: BinaryMask,
    pub refined_masks: Vec<BinaryMask>,
}

/// Pastes each object's pixels under its refined mask onto a zero canvas.
/// Where masks overlap the later object wins, matching ReGCA grouping.
pub fn compose_known(results: &[ObjectResult]) -> Result<CompositeKnown, PipelineError> {
    let first = results
        .first()
        .ok_or_else(|| PipelineError::Config("no objects to compose".into()))?;
    let (h, w) = first.image.dims();
    let shape_err = |what: String| PipelineError::Segmenter {
        stage: Stage::Segmentation,
        object: String::new(),
        message: what,
    };
    let mut known = Image::zeros(h, w);
    let mut masks = Vec::with_capacity(results.len());
    for r in results {
        let m = r.effective_mask();
        if r.image.dims() != (h, w) || m.dims() != (h, w) {
            return Err(shape_err(format!(
                "object {:?} has image {:?} and mask {:?}, canvas is {:?}",
                r.object_id,
                r.image.dims(),
                m.dims(),
                (h, w)
            )));
        }
        known = Image::select(m, &r.image, &known).map_err(|e| PipelineError::Tensor {
            stage: Stage::Segmentation,
            source: e,
        })?;
        masks.push(m.clone());
    }
    let inpaint_mask = background_mask(&masks)?;
    Ok(CompositeKnown {
        known_image: known,
        inpaint_mask,
        refined_masks: masks,
    })
}
