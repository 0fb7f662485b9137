//! Binary masks and the handful of set operations the pipelines need.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::LayoutError;

/// A `height × width` grid of {0, 1} pixels.
///
/// Stored as booleans, so the "every element is 0 or 1" invariant holds by
/// construction. Both dimensions are always non-zero.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    data: Array2<bool>,
}

/// Axis-aligned box in `[x, y, w, h]` form (x is the column, y the row).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BBox {
    pub fn as_xywh(&self) -> [usize; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.y && row < self.y + self.h && col >= self.x && col < self.x + self.w
    }

    pub fn fits_within(&self, height: usize, width: usize) -> bool {
        self.w >= 1 && self.h >= 1 && self.x + self.w <= width && self.y + self.h <= height
    }
}

impl BinaryMask {
    /// All-zero mask.
    pub fn zeros(height: usize, width: usize) -> Result<Self, LayoutError> {
        Self::from_array(Array2::from_elem((height, width), false))
    }

    /// All-one mask.
    pub fn ones(height: usize, width: usize) -> Result<Self, LayoutError> {
        Self::from_array(Array2::from_elem((height, width), true))
    }

    pub fn from_array(data: Array2<bool>) -> Result<Self, LayoutError> {
        let (h, w) = data.dim();
        if h == 0 || w == 0 {
            return Err(LayoutError::EmptyDimensions { height: h, width: w });
        }
        Ok(Self { data })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        f: impl FnMut((usize, usize)) -> bool,
    ) -> Result<Self, LayoutError> {
        Self::from_array(Array2::from_shape_fn((height, width), f))
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[(row, col)]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[(row, col)] = value;
    }

    pub fn as_array(&self) -> &Array2<bool> {
        &self.data
    }

    /// Row-major iterator over pixels.
    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        self.data.iter().copied()
    }

    /// Row-major flattening; the attention layers index pixels this way.
    pub fn to_flat(&self) -> Vec<bool> {
        self.iter().collect()
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    fn check_same(&self, other: &Self) -> Result<(), LayoutError> {
        if self.dims() != other.dims() {
            return Err(LayoutError::ShapeMismatch {
                expected: self.dims(),
                found: other.dims(),
            });
        }
        Ok(())
    }

    pub fn and(&self, other: &Self) -> Result<Self, LayoutError> {
        self.check_same(other)?;
        let data = ndarray::Zip::from(&self.data)
            .and(&other.data)
            .map_collect(|&a, &b| a && b);
        Ok(Self { data })
    }

    pub fn or(&self, other: &Self) -> Result<Self, LayoutError> {
        self.check_same(other)?;
        let data = ndarray::Zip::from(&self.data)
            .and(&other.data)
            .map_collect(|&a, &b| a || b);
        Ok(Self { data })
    }

    pub fn not(&self) -> Self {
        Self {
            data: self.data.mapv(|b| !b),
        }
    }

    /// True when every 1-pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.dims() == other.dims()
            && ndarray::Zip::from(&self.data)
                .and(&other.data)
                .all(|&a, &b| !a || b)
    }

    pub fn intersects(&self, other: &Self) -> bool {
        self.dims() == other.dims()
            && !ndarray::Zip::from(&self.data)
                .and(&other.data)
                .all(|&a, &b| !(a && b))
    }

    /// Reads an 8-bit grayscale image; values `>= 128` become 1. Colour images
    /// are converted to luma first.
    pub fn load_png(path: &Path) -> Result<Self, LayoutError> {
        let img = image::open(path)
            .map_err(|e| LayoutError::MaskImage {
                path: path.display().to_string(),
                message: e.to_string(),
            })?
            .to_luma8();
        let (w, h) = img.dimensions();
        Self::from_fn(h as usize, w as usize, |(r, c)| {
            img.get_pixel(c as u32, r as u32)[0] >= 128
        })
    }

    pub fn to_luma_image(&self) -> image::GrayImage {
        image::GrayImage::from_fn(self.width() as u32, self.height() as u32, |x, y| {
            image::Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<(), LayoutError> {
        self.to_luma_image()
            .save(path)
            .map_err(|e| LayoutError::MaskImage {
                path: path.display().to_string(),
                message: e.to_string(),
            })
    }

    /// Row-major run lengths, starting with a (possibly empty) run of zeros.
    pub fn to_runs(&self) -> Vec<usize> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0usize;
        for px in self.iter() {
            if px == current {
                len += 1;
            } else {
                runs.push(len);
                current = px;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    pub fn from_runs(height: usize, width: usize, runs: &[usize]) -> Result<Self, LayoutError> {
        let total: usize = runs.iter().sum();
        if total != height * width {
            return Err(LayoutError::RunLength {
                expected: height * width,
                found: total,
            });
        }
        let mut flat = Vec::with_capacity(total);
        for (i, &len) in runs.iter().enumerate() {
            flat.extend(std::iter::repeat_n(i % 2 == 1, len));
        }
        let data = Array2::from_shape_vec((height, width), flat)
            .expect("run total matches the mask area");
        Self::from_array(data)
    }
}

/// Tightest axis-aligned box containing every 1-pixel.
pub fn bbox(mask: &BinaryMask) -> Result<BBox, LayoutError> {
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for ((r, c), &on) in mask.data.indexed_iter() {
        if on {
            r0 = r0.min(r);
            r1 = r1.max(r);
            c0 = c0.min(c);
            c1 = c1.max(c);
        }
    }
    if r0 == usize::MAX {
        return Err(LayoutError::EmptyMask);
    }
    Ok(BBox {
        x: c0,
        y: r0,
        w: c1 - c0 + 1,
        h: r1 - r0 + 1,
    })
}

pub fn mask_area_fraction(mask: &BinaryMask) -> f64 {
    mask.count_ones() as f64 / (mask.height() * mask.width()) as f64
}

/// Pixels that belong to no object mask: the product of all complements.
pub fn background_mask(masks: &[BinaryMask]) -> Result<BinaryMask, LayoutError> {
    let first = masks.first().ok_or(LayoutError::NoMasks)?;
    let mut union = first.clone();
    for m in &masks[1..] {
        union = union.or(m)?;
    }
    Ok(union.not())
}

/// Index pairs `(i, j)`, `i < j`, whose masks share at least one pixel.
pub fn overlap_pairs(masks: &[BinaryMask]) -> Result<Vec<(usize, usize)>, LayoutError> {
    if let Some(first) = masks.first() {
        for m in masks {
            first.check_same(m)?;
        }
    }
    let mut pairs = Vec::new();
    for i in 0..masks.len() {
        for j in i + 1..masks.len() {
            if masks[i].intersects(&masks[j]) {
                pairs.push((i, j));
            }
        }
    }
    Ok(pairs)
}

/// Area-average resampling followed by a strict `> 0.5` threshold.
///
/// Each target cell covers the continuous source rectangle
/// `[i·H/th, (i+1)·H/th) × [j·W/tw, (j+1)·W/tw)`. Coordinates are scaled by
/// `th` (rows) and `tw` (columns) so every overlap is an integer and the
/// threshold comparison is exact.
pub fn downsample_mask(mask: &BinaryMask, target_h: usize, target_w: usize) -> BinaryMask {
    assert!(target_h >= 1 && target_w >= 1, "target dims must be >= 1");
    let (h, w) = mask.dims();
    if (h, w) == (target_h, target_w) {
        return mask.clone();
    }
    let row_spans = spans(h, target_h);
    let col_spans = spans(w, target_w);
    let data = Array2::from_shape_fn((target_h, target_w), |(i, j)| {
        let mut covered: u128 = 0;
        for &(r, wr) in &row_spans[i] {
            for &(c, wc) in &col_spans[j] {
                if mask.get(r, c) {
                    covered += (wr as u128) * (wc as u128);
                }
            }
        }
        // cell area in scaled units is h·w
        2 * covered > (h as u128) * (w as u128)
    });
    BinaryMask { data }
}

/// For each of `target` cells, the source indices it overlaps and the overlap
/// length in units of `1/target` source pixels.
fn spans(source: usize, target: usize) -> Vec<Vec<(usize, usize)>> {
    (0..target)
        .map(|i| {
            let lo = i * source;
            let hi = (i + 1) * source;
            let first = lo / target;
            let last = (hi - 1) / target;
            (first..=last)
                .filter_map(|r| {
                    let a = lo.max(r * target);
                    let b = hi.min((r + 1) * target);
                    (b > a).then_some((r, b - a))
                })
                .collect()
        })
        .collect()
}
