//! Layout input model: a global prompt plus an ordered list of
//! (mask, prompt, seed) object specs, and the JSON document they live in.

mod file;
mod mask;

use thiserror::Error;

pub use file::{load_layout, load_layout_file, save_layout, save_layout_with_mask_files};
pub use mask::{
    background_mask, bbox, downsample_mask, mask_area_fraction, overlap_pairs, BBox, BinaryMask,
};

#[derive(Debug, Error)]
pub enum LayoutError {
    #[error("mask dimensions must be non-zero, got {height}x{width}")]
    EmptyDimensions { height: usize, width: usize },
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error("no masks given")]
    NoMasks,
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("run-length counts cover {found} pixels, expected {expected}")]
    RunLength { expected: usize, found: usize },
    #[error("mask image {path}: {message}")]
    MaskImage { path: String, message: String },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid layout: {}", .0.join("; "))]
    Validation(Vec<String>),
    #[error("layout i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// One object of the layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSpec {
    pub id: String,
    pub prompt: String,
    pub seed: u64,
    pub mask: BinaryMask,
}

/// The pipeline input. Object order matters: later objects take precedence
/// where refined masks overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub canvas_height: usize,
    pub canvas_width: usize,
    pub global_prompt: String,
    pub objects: Vec<ObjectSpec>,
}

impl Layout {
    /// Builds a layout and checks every invariant, reporting all violations
    /// at once.
    pub fn new(
        canvas_height: usize,
        canvas_width: usize,
        global_prompt: impl Into<String>,
        objects: Vec<ObjectSpec>,
    ) -> Result<Self, LayoutError> {
        let layout = Self {
            canvas_height,
            canvas_width,
            global_prompt: global_prompt.into(),
            objects,
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<(), LayoutError> {
        let violations = self.violations();
        if violations.is_empty() {
            Ok(())
        } else {
            Err(LayoutError::Validation(violations))
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.canvas_height == 0 || self.canvas_width == 0 {
            out.push(format!(
                "canvas must be non-empty, got {}x{}",
                self.canvas_height, self.canvas_width
            ));
        }
        if self.objects.is_empty() {
            out.push("objects list is empty".to_string());
        }
        let mut seen = std::collections::HashSet::new();
        for (i, obj) in self.objects.iter().enumerate() {
            if obj.id.trim().is_empty() {
                out.push(format!("objects[{i}]: id is empty"));
            } else if obj.id.contains(['/', '\\']) || obj.id == "." || obj.id == ".." {
                out.push(format!("objects[{i}]: id {:?} is not a valid name", obj.id));
            } else if !seen.insert(obj.id.as_str()) {
                out.push(format!("objects[{i}]: duplicate id {:?}", obj.id));
            }
            if obj.prompt.trim().is_empty() {
                out.push(format!("objects[{i}] ({}): prompt is empty", obj.id));
            }
            if obj.mask.dims() != (self.canvas_height, self.canvas_width) {
                out.push(format!(
                    "objects[{i}] ({}): mask is {}x{}, canvas is {}x{}",
                    obj.id,
                    obj.mask.height(),
                    obj.mask.width(),
                    self.canvas_height,
                    self.canvas_width
                ));
            }
        }
        out
    }

    pub fn masks(&self) -> Vec<BinaryMask> {
        self.objects.iter().map(|o| o.mask.clone()).collect()
    }

    pub fn object(&self, id: &str) -> Option<&ObjectSpec> {
        self.objects.iter().find(|o| o.id == id)
    }

    /// Overlapping object pairs, by index. Overlaps are allowed; callers
    /// should only warn about them.
    pub fn overlap_pairs(&self) -> Vec<(usize, usize)> {
        overlap_pairs(&self.masks()).unwrap_or_default()
    }
}
