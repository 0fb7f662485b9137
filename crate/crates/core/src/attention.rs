//! Cross-attention primitives and the hook through which denoisers hand
//! their cross-attention layers to PACA / ReGCA.
//!
//! A denoiser computes per-head queries for each cross-attention layer and
//! calls [`CrossAttention::attend`] with them. The processor decides which
//! text the layer sees and how scores are formed; the denoiser supplies a
//! [`KvProjector`] that turns token embeddings into that layer's keys and
//! values.

use ndarray::{Array2, ArrayView2, Axis};
use thiserror::Error;

pub type Matrix = Array2<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum AttentionError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("no key/value entry for group {0}")]
    MissingGroupKv(usize),
    #[error("mask length {found} does not match {expected} pixels")]
    LengthMismatch { expected: usize, found: usize },
}

/// Where a layer sits in the UNet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockPosition {
    Down,
    Mid,
    Up,
}

/// Static description of one cross-attention layer. `height × width` is the
/// attention-map resolution; queries are flattened row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayerInfo {
    pub index: usize,
    pub height: usize,
    pub width: usize,
    pub heads: usize,
    pub block: BlockPosition,
}

impl LayerInfo {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Encoded prompt: one row per token. SOT sits at `sot_index` (0), the end
/// token at `eot_index`; rows after it are padding.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddings {
    pub embeddings: Matrix,
    pub sot_index: usize,
    pub eot_index: usize,
}

impl TokenEmbeddings {
    pub fn tokens(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn padding(&self) -> std::ops::Range<usize> {
        self.eot_index + 1..self.tokens()
    }
}

/// Keys and values of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadKv {
    pub keys: Matrix,
    pub values: Matrix,
}

/// Layer-specific projection of token embeddings into per-head K/V.
pub trait KvProjector {
    fn project(&self, text: &TokenEmbeddings) -> Vec<HeadKv>;
}

/// A cross-attention processor. Implementations must be pure given their
/// inputs; per-generation state (masks, timestep) is fixed at construction.
pub trait CrossAttention: Send + Sync {
    /// `queries` has one `pixels × d` matrix per head; returns one
    /// `pixels × d_v` output per head.
    fn attend(
        &self,
        layer: &LayerInfo,
        queries: &[Matrix],
        text: &TokenEmbeddings,
        kv: &dyn KvProjector,
    ) -> Result<Vec<Matrix>, AttentionError>;
}

/// Unmodified cross-attention.
#[derive(Debug, Default, Clone, Copy)]
pub struct PlainAttention;

impl CrossAttention for PlainAttention {
    fn attend(
        &self,
        _layer: &LayerInfo,
        queries: &[Matrix],
        text: &TokenEmbeddings,
        kv: &dyn KvProjector,
    ) -> Result<Vec<Matrix>, AttentionError> {
        let heads = kv.project(text);
        check_heads(queries, &heads)?;
        queries
            .iter()
            .zip(&heads)
            .map(|(q, h)| attention(q.view(), &h.keys, &h.values))
            .collect()
    }
}

pub(crate) fn check_heads(queries: &[Matrix], heads: &[HeadKv]) -> Result<(), AttentionError> {
    if queries.len() != heads.len() {
        return Err(AttentionError::DimensionMismatch(format!(
            "{} query heads, {} key/value heads",
            queries.len(),
            heads.len()
        )));
    }
    Ok(())
}

/// `Q·Kᵀ/√d`.
pub fn scaled_scores(queries: ArrayView2<f64>, keys: &Matrix) -> Result<Matrix, AttentionError> {
    if queries.ncols() != keys.ncols() {
        return Err(AttentionError::DimensionMismatch(format!(
            "query dim {} vs key dim {}",
            queries.ncols(),
            keys.ncols()
        )));
    }
    let scale = 1.0 / (queries.ncols() as f64).sqrt();
    Ok(queries.dot(&keys.t()) * scale)
}

/// Numerically stable row softmax.
pub fn softmax_rows(scores: &Matrix) -> Matrix {
    let mut out = scores.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// `softmax(scores)·V`.
pub fn attend_scores(scores: &Matrix, values: &Matrix) -> Result<Matrix, AttentionError> {
    if scores.ncols() != values.nrows() {
        return Err(AttentionError::DimensionMismatch(format!(
            "{} scores per row vs {} value rows",
            scores.ncols(),
            values.nrows()
        )));
    }
    Ok(softmax_rows(scores).dot(values))
}

/// Scaled dot-product attention.
pub fn attention(
    queries: ArrayView2<f64>,
    keys: &Matrix,
    values: &Matrix,
) -> Result<Matrix, AttentionError> {
    if keys.nrows() != values.nrows() {
        return Err(AttentionError::DimensionMismatch(format!(
            "{} keys vs {} values",
            keys.nrows(),
            values.nrows()
        )));
    }
    attend_scores(&scaled_scores(queries, keys)?, values)
}
