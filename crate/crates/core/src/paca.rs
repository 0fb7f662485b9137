//! Prompt-adjusted cross-attention.
//!
//! Before the softmax, every pixel inside the object mask gets `w_t` added to
//! its scores for tokens `1..=eot` (everything but SOT), and every pixel
//! outside gets `w_t` added to its SOT score only. Attending to SOT renders a
//! generic background pixel, so the object is pulled into the mask and
//! pushed out of the rest.

use std::collections::HashMap;
use std::sync::Mutex;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attend_scores, check_heads, scaled_scores, softmax_rows, AttentionError, CrossAttention,
    KvProjector, LayerInfo, Matrix, TokenEmbeddings,
};
use crate::diffusion::Schedule;
use crate::layout::{downsample_mask, BinaryMask};

/// Pre-softmax scores `QKᵀ/√d`, `pixels × tokens`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix(Matrix);

impl SimilarityMatrix {
    pub fn new(scores: Matrix) -> Result<Self, AttentionError> {
        if !scores.iter().all(|v| v.is_finite()) {
            return Err(AttentionError::DimensionMismatch(
                "similarity matrix has non-finite entries".into(),
            ));
        }
        Ok(Self(scores))
    }

    pub fn pixels(&self) -> usize {
        self.0.nrows()
    }

    pub fn tokens(&self) -> usize {
        self.0.ncols()
    }

    pub fn max(&self) -> f64 {
        self.0.fold(f64::NEG_INFINITY, |m, &v| m.max(v))
    }

    pub fn as_array(&self) -> &Matrix {
        &self.0
    }

    pub fn into_array(self) -> Matrix {
        self.0
    }
}

/// User-facing knobs (config keys `sog.paca.w_prime`,
/// `sog.paca.max_attention_resolution`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PacaSettings {
    pub w_prime: f64,
    /// Layers whose attention map is larger than this (on either side) are
    /// left untouched.
    pub max_attention_resolution: usize,
}

impl Default for PacaSettings {
    fn default() -> Self {
        Self {
            w_prime: 1.0,
            max_attention_resolution: 32,
        }
    }
}

impl PacaSettings {
    pub fn selects(&self, layer: &LayerInfo) -> bool {
        layer.height.max(layer.width) <= self.max_attention_resolution
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.w_prime > 0.0 && self.w_prime.is_finite()) {
            return Err(format!("paca.w_prime must be > 0, got {}", self.w_prime));
        }
        Ok(())
    }
}

/// Token layout and strength for one prompt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PacaConfig {
    pub w_prime: f64,
    pub sot_index: usize,
    pub eot_index: usize,
}

impl PacaConfig {
    pub fn new(w_prime: f64, sot_index: usize, eot_index: usize) -> Self {
        Self {
            w_prime,
            sot_index,
            eot_index,
        }
    }

    pub fn for_text(w_prime: f64, text: &TokenEmbeddings) -> Self {
        Self::new(w_prime, text.sot_index, text.eot_index)
    }

    fn check(&self, tokens: usize) -> Result<(), AttentionError> {
        if !(self.sot_index < self.eot_index && self.eot_index < tokens) {
            return Err(AttentionError::DimensionMismatch(format!(
                "need sot {} < eot {} < tokens {tokens}",
                self.sot_index, self.eot_index
            )));
        }
        Ok(())
    }
}

/// σ_t = √(1−α_t)/√α_t.
pub fn noise_signal_ratio(t: usize, schedule: &Schedule) -> f64 {
    let a = schedule.alpha_bar(t);
    (1.0 - a).sqrt() / a.sqrt()
}

/// `w′·log(1+σ_t)·max(S)`, with the max taken over the unmodified scores.
pub fn paca_weight(w_prime: f64, sigma_t: f64, scores: &SimilarityMatrix) -> f64 {
    w_prime * (1.0 + sigma_t).ln() * scores.max()
}

/// Returns a modified copy of `scores`; the input is left as is.
pub fn apply_paca(
    scores: &SimilarityMatrix,
    mask_flat: &[bool],
    cfg: &PacaConfig,
    w_t: f64,
) -> Result<SimilarityMatrix, AttentionError> {
    if mask_flat.len() != scores.pixels() {
        return Err(AttentionError::LengthMismatch {
            expected: scores.pixels(),
            found: mask_flat.len(),
        });
    }
    cfg.check(scores.tokens())?;
    let mut out = scores.0.clone();
    for (mut row, &inside) in out.axis_iter_mut(Axis(0)).zip(mask_flat) {
        if inside {
            for k in 0..=cfg.eot_index {
                if k != cfg.sot_index {
                    row[k] += w_t;
                }
            }
        } else {
            row[cfg.sot_index] += w_t;
        }
    }
    Ok(SimilarityMatrix(out))
}

/// Smallest boost above which SOT is the strict argmax of `row`.
pub fn sot_argmax_threshold(row: &[f64], sot_index: usize) -> f64 {
    let best_other = row
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != sot_index)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    best_other - row[sot_index]
}

/// The object mask downsampled to every attention resolution a denoiser
/// uses, computed once per object.
#[derive(Debug, Clone)]
pub struct PacaMasks {
    mask: BinaryMask,
    by_resolution: HashMap<(usize, usize), Vec<bool>>,
}

impl PacaMasks {
    pub fn new(mask: &BinaryMask, layers: &[LayerInfo]) -> Self {
        let mut by_resolution = HashMap::new();
        for layer in layers {
            by_resolution
                .entry((layer.height, layer.width))
                .or_insert_with(|| downsample_mask(mask, layer.height, layer.width).to_flat());
        }
        Self {
            mask: mask.clone(),
            by_resolution,
        }
    }

    pub fn at(&self, height: usize, width: usize) -> std::borrow::Cow<'_, [bool]> {
        match self.by_resolution.get(&(height, width)) {
            Some(v) => std::borrow::Cow::Borrowed(v),
            None => std::borrow::Cow::Owned(downsample_mask(&self.mask, height, width).to_flat()),
        }
    }
}

/// Head-averaged attention probabilities of one PACA layer call: mass on
/// SOT and on all other tokens, per pixel.
#[derive(Debug, Clone)]
pub struct AttentionSnapshot {
    pub layer: LayerInfo,
    pub sot: Vec<f64>,
    pub others: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct AttentionRecorder {
    snapshots: Mutex<Vec<AttentionSnapshot>>,
}

impl AttentionRecorder {
    pub fn take(&self) -> Vec<AttentionSnapshot> {
        std::mem::take(&mut *self.snapshots.lock().expect("recorder lock"))
    }
}

/// PACA as a cross-attention processor for one (object, timestep) on the
/// conditional branch. Layers rejected by the selector run unmodified.
pub struct PacaAttention<'a> {
    masks: &'a PacaMasks,
    settings: PacaSettings,
    sigma_t: f64,
    recorder: Option<&'a AttentionRecorder>,
}

impl<'a> PacaAttention<'a> {
    pub fn new(masks: &'a PacaMasks, settings: PacaSettings, sigma_t: f64) -> Self {
        Self {
            masks,
            settings,
            sigma_t,
            recorder: None,
        }
    }

    pub fn with_recorder(mut self, recorder: &'a AttentionRecorder) -> Self {
        self.recorder = Some(recorder);
        self
    }
}

impl CrossAttention for PacaAttention<'_> {
    fn attend(
        &self,
        layer: &LayerInfo,
        queries: &[Matrix],
        text: &TokenEmbeddings,
        kv: &dyn KvProjector,
    ) -> Result<Vec<Matrix>, AttentionError> {
        let heads = kv.project(text);
        check_heads(queries, &heads)?;
        let selected = self.settings.selects(layer);
        let mask = self.masks.at(layer.height, layer.width);
        let cfg = PacaConfig::for_text(self.settings.w_prime, text);
        let mut outputs = Vec::with_capacity(heads.len());
        let mut probs_sum: Option<Matrix> = None;
        for (q, head) in queries.iter().zip(&heads) {
            let raw = scaled_scores(q.view(), &head.keys)?;
            let scores = if selected {
                let s = SimilarityMatrix::new(raw)?;
                let w_t = paca_weight(self.settings.w_prime, self.sigma_t, &s);
                apply_paca(&s, &mask, &cfg, w_t)?.into_array()
            } else {
                raw
            };
            if selected && self.recorder.is_some() {
                let p = softmax_rows(&scores);
                probs_sum = Some(match probs_sum {
                    Some(acc) => acc + &p,
                    None => p,
                });
            }
            outputs.push(attend_scores(&scores, &head.values)?);
        }
        if let (Some(rec), Some(sum)) = (self.recorder, probs_sum) {
            let n = heads.len() as f64;
            let sot: Vec<f64> = sum.column(cfg.sot_index).iter().map(|v| v / n).collect();
            let others = sot.iter().map(|s| 1.0 - s).collect();
            rec.snapshots.lock().expect("recorder lock").push(AttentionSnapshot {
                layer: *layer,
                sot,
                others,
            });
        }
        Ok(outputs)
    }
}
