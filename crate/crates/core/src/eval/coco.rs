//! COCO instance annotations → layouts.

use std::collections::HashMap;

use serde::Deserialize;

use crate::error::PipelineError;
use crate::layout::{mask_area_fraction, BinaryMask, Layout, ObjectSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct PrepareOptions {
    /// Masks covering strictly less than this fraction of the image are
    /// dropped.
    pub min_area_fraction: f64,
    pub target_size: usize,
    /// `{}` is replaced by the category name.
    pub prompt_template: String,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self {
            min_area_fraction: 0.05,
            target_size: 512,
            prompt_template: "a photo of a {}".into(),
        }
    }
}

/// A layout built from one annotated image.
#[derive(Debug, Clone, PartialEq)]
pub struct CocoLayout {
    pub image_id: u64,
    pub file_name: String,
    pub layout: Layout,
}

#[derive(Debug, Deserialize)]
struct Dataset {
    images: Vec<ImageEntry>,
    annotations: Vec<Annotation>,
    categories: Vec<Category>,
}

#[derive(Debug, Deserialize)]
struct ImageEntry {
    id: u64,
    width: usize,
    height: usize,
    #[serde(default)]
    file_name: String,
}

#[derive(Debug, Deserialize)]
struct Category {
    id: u64,
    name: String,
}

#[derive(Debug, Deserialize)]
struct Annotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    segmentation: Segmentation,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum Segmentation {
    Polygons(Vec<Vec<f64>>),
    Rle { counts: RleCounts, size: [usize; 2] },
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RleCounts {
    Raw(Vec<usize>),
    Compressed(String),
}

/// Even-odd fill of polygons sampled at pixel centres.
pub fn rasterize_polygons(
    polygons: &[Vec<f64>],
    height: usize,
    width: usize,
) -> Result<BinaryMask, PipelineError> {
    let mut mask = BinaryMask::zeros(height, width)?;
    for poly in polygons {
        if poly.len() < 6 || poly.len() % 2 != 0 {
            return Err(PipelineError::Annotation(format!(
                "polygon with {} coordinates",
                poly.len()
            )));
        }
        let pts: Vec<(f64, f64)> = poly.chunks(2).map(|p| (p[0], p[1])).collect();
        for r in 0..height {
            let y = r as f64 + 0.5;
            let mut xs: Vec<f64> = Vec::new();
            for i in 0..pts.len() {
                let (x0, y0) = pts[i];
                let (x1, y1) = pts[(i + 1) % pts.len()];
                if (y0 <= y) != (y1 <= y) {
                    xs.push(x0 + (y - y0) * (x1 - x0) / (y1 - y0));
                }
            }
            xs.sort_by(f64::total_cmp);
            for span in xs.chunks(2) {
                if let [a, b] = span {
                    for c in 0..width {
                        let x = c as f64 + 0.5;
                        if x >= *a && x < *b {
                            let v = mask.get(r, c);
                            mask.set(r, c, !v);
                        }
                    }
                }
            }
        }
    }
    Ok(mask)
}

/// Decodes the string form of COCO run-length counts.
pub fn decode_compressed_counts(s: &str) -> Result<Vec<usize>, PipelineError> {
    let bytes = s.as_bytes();
    let mut counts: Vec<i64> = Vec::new();
    let mut p = 0;
    while p < bytes.len() {
        let mut x: i64 = 0;
        let mut k = 0;
        loop {
            let c = bytes
                .get(p)
                .map(|b| *b as i64 - 48)
                .ok_or_else(|| PipelineError::Annotation("truncated RLE string".into()))?;
            if !(0..64).contains(&c) {
                return Err(PipelineError::Annotation(format!(
                    "invalid RLE character {:?}",
                    bytes[p] as char
                )));
            }
            x |= (c & 0x1f) << (5 * k);
            p += 1;
            k += 1;
            if c & 0x20 == 0 {
                if c & 0x10 != 0 {
                    x |= -1i64 << (5 * k);
                }
                break;
            }
            if k > 12 {
                return Err(PipelineError::Annotation("RLE count overflow".into()));
            }
        }
        if counts.len() > 2 {
            x += counts[counts.len() - 2];
        }
        counts.push(x);
    }
    counts
        .into_iter()
        .map(|c| {
            usize::try_from(c).map_err(|_| PipelineError::Annotation("negative RLE count".into()))
        })
        .collect()
}

/// Column-major runs, starting with zeros.
pub fn decode_rle(counts: &[usize], height: usize, width: usize) -> Result<BinaryMask, PipelineError> {
    let total: usize = counts.iter().sum();
    if total != height * width {
        return Err(PipelineError::Annotation(format!(
            "RLE covers {total} pixels, image has {}",
            height * width
        )));
    }
    let mut mask = BinaryMask::zeros(height, width)?;
    let mut i = 0;
    for (k, &n) in counts.iter().enumerate() {
        if k % 2 == 1 {
            for j in i..i + n {
                mask.set(j % height, j / height, true);
            }
        }
        i += n;
    }
    Ok(mask)
}

/// Nearest-neighbour resize sampling the source pixel under each target
/// pixel centre.
pub fn resize_nearest(mask: &BinaryMask, target_h: usize, target_w: usize) -> BinaryMask {
    let (h, w) = mask.dims();
    BinaryMask::from_fn(target_h, target_w, |(r, c)| {
        let sr = ((2 * r + 1) * h / (2 * target_h)).min(h - 1);
        let sc = ((2 * c + 1) * w / (2 * target_w)).min(w - 1);
        mask.get(sr, sc)
    })
    .expect("target dims >= 1")
}

fn decode_segmentation(seg: &Segmentation, img: &ImageEntry) -> Result<BinaryMask, PipelineError> {
    match seg {
        Segmentation::Polygons(polys) => rasterize_polygons(polys, img.height, img.width),
        Segmentation::Rle { counts, size } => {
            if size[0] != img.height || size[1] != img.width {
                return Err(PipelineError::Annotation(format!(
                    "RLE size {size:?} differs from image {}x{}",
                    img.height, img.width
                )));
            }
            let counts = match counts {
                RleCounts::Raw(c) => c.clone(),
                RleCounts::Compressed(s) => decode_compressed_counts(s)?,
            };
            decode_rle(&counts, img.height, img.width)
        }
    }
}

/// Builds one layout per image. Annotation order defines object order;
/// each object's seed is its annotation id. Images left without masks are
/// skipped.
pub fn prepare_layouts(json: &[u8], opts: &PrepareOptions) -> Result<Vec<CocoLayout>, PipelineError> {
    if opts.target_size == 0 {
        return Err(PipelineError::Config("target_size must be >= 1".into()));
    }
    let data: Dataset = serde_json::from_slice(json).map_err(|e| {
        PipelineError::Annotation(format!("line {} column {}: {e}", e.line(), e.column()))
    })?;
    let categories: HashMap<u64, &str> = data
        .categories
        .iter()
        .map(|c| (c.id, c.name.as_str()))
        .collect();
    let mut by_image: HashMap<u64, Vec<&Annotation>> = HashMap::new();
    for a in &data.annotations {
        by_image.entry(a.image_id).or_default().push(a);
    }
    let mut out = Vec::new();
    for img in &data.images {
        if img.height == 0 || img.width == 0 {
            return Err(PipelineError::Annotation(format!("image {} has no pixels", img.id)));
        }
        let mut objects = Vec::new();
        let mut names: Vec<&str> = Vec::new();
        for a in by_image.get(&img.id).map(Vec::as_slice).unwrap_or(&[]) {
            let name = *categories.get(&a.category_id).ok_or_else(|| {
                PipelineError::Annotation(format!("unknown category {}", a.category_id))
            })?;
            let mask = decode_segmentation(&a.segmentation, img)?;
            if mask_area_fraction(&mask) < opts.min_area_fraction {
                continue;
            }
            let resized = resize_nearest(&mask, opts.target_size, opts.target_size);
            if resized.is_empty() {
                continue;
            }
            if !names.contains(&name) {
                names.push(name);
            }
            objects.push(ObjectSpec {
                id: format!("ann{}", a.id),
                prompt: opts.prompt_template.replace("{}", name),
                seed: a.id,
                mask: resized,
            });
        }
        if objects.is_empty() {
            continue;
        }
        let layout = Layout::new(opts.target_size, opts.target_size, names.join(", "), objects)?;
        out.push(CocoLayout {
            image_id: img.id,
            file_name: img.file_name.clone(),
            layout,
        });
    }
    Ok(out)
}
