//! Pipeline-level errors carrying the stage and object they came from.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::BackendError;
use crate::diffusion::DiffusionError;
use crate::layout::LayoutError;
use crate::tensor::TensorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Layout,
    Sog,
    Segmentation,
    Cc,
    Eval,
    Io,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Config => "config",
            Stage::Layout => "layout",
            Stage::Sog => "sog",
            Stage::Segmentation => "segmentation",
            Stage::Cc => "cc",
            Stage::Eval => "eval",
            Stage::Io => "io",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("object {object:?} has an empty mask")]
    EmptyMask { stage: Stage, object: String },
    #[error("{stage} stage, object {}: {source}", object.as_deref().unwrap_or("-"))]
    Backend {
        stage: Stage,
        object: Option<String>,
        #[source]
        source: BackendError,
    },
    #[error("{stage} stage, object {}: {source}", object.as_deref().unwrap_or("-"))]
    Diffusion {
        stage: Stage,
        object: Option<String>,
        #[source]
        source: DiffusionError,
    },
    #[error("{stage} stage: {source}")]
    Tensor {
        stage: Stage,
        #[source]
        source: TensorError,
    },
    #[error("{stage} stage: segmenter failed for object {object:?}: {message}")]
    Segmenter {
        stage: Stage,
        object: String,
        message: String,
    },
    #[error("annotation parse error: {0}")]
    Annotation(String),
    #[error("{0}")]
    NotFound(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    pub fn stage(&self) -> Stage {
        match self {
            PipelineError::Config(_) => Stage::Config,
            PipelineError::Layout(_) => Stage::Layout,
            PipelineError::EmptyMask { stage, .. }
            | PipelineError::Backend { stage, .. }
            | PipelineError::Diffusion { stage, .. }
            | PipelineError::Tensor { stage, .. }
            | PipelineError::Segmenter { stage, .. } => *stage,
            PipelineError::Annotation(_) => Stage::Eval,
            PipelineError::NotFound(_) | PipelineError::Io { .. } => Stage::Io,
        }
    }

    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "invalid_config",
            PipelineError::Layout(LayoutError::Validation(_)) => "validation_error",
            PipelineError::Layout(LayoutError::Parse { .. }) => "parse_error",
            PipelineError::Layout(_) => "layout_error",
            PipelineError::EmptyMask { .. } => "empty_mask",
            PipelineError::Backend { .. } => "backend_failure",
            PipelineError::Diffusion { .. } => "diffusion_error",
            PipelineError::Tensor { .. } => "shape_mismatch",
            PipelineError::Segmenter { .. } => "segmenter_failure",
            PipelineError::Annotation(_) => "annotation_parse_error",
            PipelineError::NotFound(_) => "not_found",
            PipelineError::Io { .. } => "io_error",
        }
    }

    /// True for errors caused by the caller's input rather than by a run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            PipelineError::Config(_)
                | PipelineError::Layout(_)
                | PipelineError::Annotation(_)
                | PipelineError::EmptyMask {
                    stage: Stage::Layout,
                    ..
                }
        )
    }

    pub(crate) fn backend(stage: Stage, object: Option<&str>, source: BackendError) -> Self {
        PipelineError::Backend {
            stage,
            object: object.map(str::to_string),
            source,
        }
    }

    pub(crate) fn diffusion(stage: Stage, object: Option<&str>, source: DiffusionError) -> Self {
        PipelineError::Diffusion {
            stage,
            object: object.map(str::to_string),
            source,
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
