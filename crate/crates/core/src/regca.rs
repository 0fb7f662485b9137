//! Region-grouped cross-attention.
//!
//! Latent pixels are partitioned into one group per object plus a background
//! group. Each group attends only to the keys/values of its own prompt:
//! object groups use the object prompt (conditional) and the empty string
//! (unconditional); the background uses the global prompt (conditional) and
//! the comma-joined object prompts as a negative prompt (unconditional).

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use ndarray::Axis;

use crate::attention::{
    attention, AttentionError, CrossAttention, HeadKv, KvProjector, LayerInfo, Matrix,
    TokenEmbeddings,
};
use crate::layout::{downsample_mask, BinaryMask};

/// What a group stands for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GroupKind {
    /// Index into the layout's object list.
    Object(usize),
    Background,
}

/// Exact partition of `pixels` into groups `0..G`. Object `i` is group `i`;
/// the background is always the last group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupAssignment {
    group_of_pixel: Vec<usize>,
    groups: Vec<GroupKind>,
}

impl GroupAssignment {
    pub fn group_of_pixel(&self) -> &[usize] {
        &self.group_of_pixel
    }

    pub fn groups(&self) -> &[GroupKind] {
        &self.groups
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn pixels(&self) -> usize {
        self.group_of_pixel.len()
    }

    pub fn background_group(&self) -> usize {
        self.groups.len() - 1
    }

    /// Pixel indices of each group, in ascending order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.groups.len()];
        for (i, &g) in self.group_of_pixel.iter().enumerate() {
            out[g].push(i);
        }
        out
    }

    /// Builds an assignment from raw group ids, checking they reference
    /// existing groups.
    pub fn from_parts(
        group_of_pixel: Vec<usize>,
        groups: Vec<GroupKind>,
    ) -> Result<Self, AttentionError> {
        if groups.last() != Some(&GroupKind::Background) {
            return Err(AttentionError::DimensionMismatch(
                "the last group must be the background".into(),
            ));
        }
        if let Some(&g) = group_of_pixel.iter().find(|&&g| g >= groups.len()) {
            return Err(AttentionError::MissingGroupKv(g));
        }
        Ok(Self {
            group_of_pixel,
            groups,
        })
    }
}

/// Partition at `latent_h × latent_w`. A pixel covered by several masks goes
/// to the highest-index object; uncovered pixels go to the background.
pub fn assign_groups(
    refined_masks: &[BinaryMask],
    latent_h: usize,
    latent_w: usize,
) -> GroupAssignment {
    let n = refined_masks.len();
    let small: Vec<BinaryMask> = refined_masks
        .iter()
        .map(|m| downsample_mask(m, latent_h, latent_w))
        .collect();
    let group_of_pixel = (0..latent_h * latent_w)
        .map(|p| {
            let (r, c) = (p / latent_w, p % latent_w);
            (0..n).rev().find(|&i| small[i].get(r, c)).unwrap_or(n)
        })
        .collect();
    let mut groups: Vec<GroupKind> = (0..n).map(GroupKind::Object).collect();
    groups.push(GroupKind::Background);
    GroupAssignment {
        group_of_pixel,
        groups,
    }
}

/// Conditional / unconditional prompt text per group, in group order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPrompts {
    pub conditional: Vec<String>,
    pub unconditional: Vec<String>,
}

pub fn build_group_prompts<S: AsRef<str>>(
    object_prompts: &[S],
    global_prompt: &str,
    separator: &str,
) -> GroupPrompts {
    let mut conditional: Vec<String> = object_prompts.iter().map(|p| p.as_ref().to_string()).collect();
    let mut unconditional = vec![String::new(); object_prompts.len()];
    conditional.push(global_prompt.to_string());
    unconditional.push(
        object_prompts
            .iter()
            .map(|p| p.as_ref())
            .collect::<Vec<_>>()
            .join(separator),
    );
    GroupPrompts {
        conditional,
        unconditional,
    }
}

/// Keys/values of one group for both guidance branches.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupKv {
    pub cond: HeadKv,
    pub uncond: HeadKv,
}

/// Each group's queries attend to that group's K/V; outputs are scattered
/// back to the original pixel positions.
pub fn grouped_attention(
    queries: &Matrix,
    assignment: &GroupAssignment,
    group_kv: &[&HeadKv],
) -> Result<Matrix, AttentionError> {
    if queries.nrows() != assignment.pixels() {
        return Err(AttentionError::LengthMismatch {
            expected: queries.nrows(),
            found: assignment.pixels(),
        });
    }
    let mut out: Option<Matrix> = None;
    for (g, members) in assignment.members().into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let kv = group_kv.get(g).ok_or(AttentionError::MissingGroupKv(g))?;
        let sub = queries.select(Axis(0), &members);
        let res = attention(sub.view(), &kv.keys, &kv.values)?;
        let target = out.get_or_insert_with(|| Matrix::zeros((queries.nrows(), res.ncols())));
        if target.ncols() != res.ncols() {
            return Err(AttentionError::DimensionMismatch(format!(
                "group {g} values have dim {}, expected {}",
                res.ncols(),
                target.ncols()
            )));
        }
        for (row, &p) in members.iter().enumerate() {
            target.row_mut(p).assign(&res.row(row));
        }
    }
    Ok(out.unwrap_or_else(|| Matrix::zeros((0, 0))))
}

/// Both branches at once: `(out_cond, out_uncond)`.
pub fn regca_attention(
    queries: &Matrix,
    assignment: &GroupAssignment,
    group_kv: &[GroupKv],
) -> Result<(Matrix, Matrix), AttentionError> {
    if group_kv.len() < assignment.num_groups() {
        return Err(AttentionError::MissingGroupKv(group_kv.len()));
    }
    let cond: Vec<&HeadKv> = group_kv.iter().map(|g| &g.cond).collect();
    let uncond: Vec<&HeadKv> = group_kv.iter().map(|g| &g.uncond).collect();
    Ok((
        grouped_attention(queries, assignment, &cond)?,
        grouped_attention(queries, assignment, &uncond)?,
    ))
}

/// ReGCA as a processor for one guidance branch. The `text` a denoiser
/// passes in is ignored; each group uses its own encoded prompt. Projected
/// K/V are cached per layer for the lifetime of the processor (one scene
/// generation), since text embeddings do not depend on the timestep.
pub struct RegcaAttention {
    group_texts: Vec<TokenEmbeddings>,
    refined_masks: Vec<BinaryMask>,
    assignments: Mutex<HashMap<(usize, usize), Arc<GroupAssignment>>>,
    kv_cache: Mutex<HashMap<usize, Arc<Vec<Vec<HeadKv>>>>>,
}

impl RegcaAttention {
    /// `group_texts` must hold one encoding per group (objects, then
    /// background).
    pub fn new(
        group_texts: Vec<TokenEmbeddings>,
        refined_masks: Vec<BinaryMask>,
    ) -> Result<Self, AttentionError> {
        if group_texts.len() != refined_masks.len() + 1 {
            return Err(AttentionError::MissingGroupKv(group_texts.len()));
        }
        Ok(Self {
            group_texts,
            refined_masks,
            assignments: Mutex::new(HashMap::new()),
            kv_cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn assignment(&self, height: usize, width: usize) -> Arc<GroupAssignment> {
        self.assignments
            .lock()
            .expect("assignment cache")
            .entry((height, width))
            .or_insert_with(|| Arc::new(assign_groups(&self.refined_masks, height, width)))
            .clone()
    }

    fn group_kv(&self, layer: &LayerInfo, kv: &dyn KvProjector) -> Arc<Vec<Vec<HeadKv>>> {
        if let Some(hit) = self.kv_cache.lock().expect("kv cache").get(&layer.index) {
            return hit.clone();
        }
        let projected: Arc<Vec<Vec<HeadKv>>> =
            Arc::new(self.group_texts.iter().map(|t| kv.project(t)).collect());
        self.kv_cache
            .lock()
            .expect("kv cache")
            .insert(layer.index, projected.clone());
        projected
    }
}

impl CrossAttention for RegcaAttention {
    fn attend(
        &self,
        layer: &LayerInfo,
        queries: &[Matrix],
        _text: &TokenEmbeddings,
        kv: &dyn KvProjector,
    ) -> Result<Vec<Matrix>, AttentionError> {
        let assignment = self.assignment(layer.height, layer.width);
        let per_group = self.group_kv(layer, kv);
        queries
            .iter()
            .enumerate()
            .map(|(h, q)| {
                let heads: Vec<&HeadKv> = per_group
                    .iter()
                    .map(|g| {
                        g.get(h).ok_or_else(|| {
                            AttentionError::DimensionMismatch(format!("missing head {h}"))
                        })
                    })
                    .collect::<Result<_, _>>()?;
                grouped_attention(q, &assignment, &heads)
            })
            .collect()
    }
}
