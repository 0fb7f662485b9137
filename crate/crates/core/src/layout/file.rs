//! The layout document:
//!
//! ```json
//! {"canvas": {"h": 512, "w": 512},
//!  "global_prompt": "a kitchen table",
//!  "objects": [{"id": "apple", "prompt": "a red apple", "seed": 7, "mask": "masks/apple.png"}]}
//! ```
//!
//! `mask` is either a path to a single-channel PNG (relative to the document)
//! or an inline row-major run-length object `{"counts": [zeros, ones, ...]}`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BinaryMask, Layout, LayoutError, ObjectSpec};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    canvas: Canvas,
    global_prompt: String,
    objects: Vec<ObjectEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Canvas {
    h: usize,
    w: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ObjectEntry {
    id: String,
    prompt: String,
    seed: u64,
    mask: MaskRef,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum MaskRef {
    Path(String),
    Inline { counts: Vec<usize> },
}

/// Parses a layout document. Relative mask paths resolve against `base_dir`
/// (or the working directory when `None`).
pub fn load_layout(bytes: &[u8], base_dir: Option<&Path>) -> Result<Layout, LayoutError> {
    let doc: Document = serde_json::from_slice(bytes).map_err(|e| LayoutError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;

    let (h, w) = (doc.canvas.h, doc.canvas.w);
    let mut violations = Vec::new();
    let mut objects = Vec::with_capacity(doc.objects.len());
    for (i, entry) in doc.objects.into_iter().enumerate() {
        let mask = match entry.mask {
            MaskRef::Path(p) => {
                let path = resolve(base_dir, &p);
                BinaryMask::load_png(&path)?
            }
            MaskRef::Inline { counts } => match BinaryMask::from_runs(h, w, &counts) {
                Ok(m) => m,
                Err(e) => {
                    violations.push(format!("objects[{i}] ({}): {e}", entry.id));
                    continue;
                }
            },
        };
        objects.push(ObjectSpec {
            id: entry.id,
            prompt: entry.prompt,
            seed: entry.seed,
            mask,
        });
    }

    let layout = Layout {
        canvas_height: h,
        canvas_width: w,
        global_prompt: doc.global_prompt,
        objects,
    };
    violations.extend(layout.violations());
    if !violations.is_empty() {
        return Err(LayoutError::Validation(violations));
    }
    for (i, j) in layout.overlap_pairs() {
        log::warn!(
            "objects {:?} and {:?} overlap; the later one takes precedence",
            layout.objects[i].id,
            layout.objects[j].id
        );
    }
    Ok(layout)
}

pub fn load_layout_file(path: &Path) -> Result<Layout, LayoutError> {
    let bytes = std::fs::read(path)?;
    load_layout(&bytes, path.parent())
}

/// Serializes with inline run-length masks, so the document is
/// self-contained and `load_layout(save_layout(l)) == l`.
pub fn save_layout(layout: &Layout) -> Vec<u8> {
    let doc = document(layout, |obj| MaskRef::Inline {
        counts: obj.mask.to_runs(),
    });
    serde_json::to_vec_pretty(&doc).expect("layout document serializes")
}

/// Writes `<dir>/layout.json` with masks as `<dir>/masks/<id>.png`.
pub fn save_layout_with_mask_files(layout: &Layout, dir: &Path) -> Result<PathBuf, LayoutError> {
    let mask_dir = dir.join("masks");
    std::fs::create_dir_all(&mask_dir)?;
    for obj in &layout.objects {
        obj.mask.save_png(&mask_dir.join(format!("{}.png", obj.id)))?;
    }
    let doc = document(layout, |obj| MaskRef::Path(format!("masks/{}.png", obj.id)));
    let path = dir.join("layout.json");
    std::fs::write(
        &path,
        serde_json::to_vec_pretty(&doc).expect("layout document serializes"),
    )?;
    Ok(path)
}

fn document(layout: &Layout, mask_ref: impl Fn(&ObjectSpec) -> MaskRef) -> Document {
    Document {
        canvas: Canvas {
            h: layout.canvas_height,
            w: layout.canvas_width,
        },
        global_prompt: layout.global_prompt.clone(),
        objects: layout
            .objects
            .iter()
            .map(|o| ObjectEntry {
                id: o.id.clone(),
                prompt: o.prompt.clone(),
                seed: o.seed,
                mask: mask_ref(o),
            })
            .collect(),
    }
}

fn resolve(base: Option<&Path>, p: &str) -> PathBuf {
    let path = Path::new(p);
    match base {
        Some(b) if path.is_relative() => b.join(path),
        _ => path.to_path_buf(),
    }
}
