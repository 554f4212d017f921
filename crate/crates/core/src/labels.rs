//! Derived labels consumed by the adaptation losses.
//!
//! Everything here is a pure function of a ground-truth [`LabelMap`] or a
//! predicted [`ProbMap`]: coarse patch presence labels, argmax pseudo-labels,
//! low-confidence masks and one-hot encodings.
//!
//! Arrays are stored channel-first (`C × H × W`) to match the network layout.

use ndarray::{Array2, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Label value for pixels that carry no class.
pub const IGNORE: u8 = 255;

/// Tolerance on the per-pixel probability sum of a [`ProbMap`].
pub const SIMPLEX_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum LabelError {
    #[error("label value {value} at ({row}, {col}) is not a class index below {num_classes} nor the ignore value")]
    InvalidLabel {
        value: u8,
        row: usize,
        col: usize,
        num_classes: usize,
    },
    #[error("need at least 2 classes and fewer than 255, got {0}")]
    InvalidClassCount(usize),
    #[error("probabilities at ({row}, {col}) sum to {sum}, not 1")]
    NotNormalized { row: usize, col: usize, sum: f64 },
    #[error("probability map contains a non-finite or negative value")]
    InvalidProbability,
    #[error("patch grid {grid_height}x{grid_width} does not fit a {height}x{width} map")]
    GridMismatch {
        grid_height: usize,
        grid_width: usize,
        height: usize,
        width: usize,
    },
    #[error("threshold {0} must lie in the open interval (0, 1)")]
    InvalidThreshold(f64),
    #[error("threshold {0} must lie in (0, 1]")]
    InvalidUncertaintyThreshold(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Per-pixel class indices, `H × W`, with [`IGNORE`] marking unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    data: Array2<u8>,
    num_classes: usize,
}

impl LabelMap {
    pub fn new(data: Array2<u8>, num_classes: usize) -> Result<Self, LabelError> {
        if !(2..255).contains(&num_classes) {
            return Err(LabelError::InvalidClassCount(num_classes));
        }
        for ((row, col), &value) in data.indexed_iter() {
            if value != IGNORE && value as usize >= num_classes {
                return Err(LabelError::InvalidLabel {
                    value,
                    row,
                    col,
                    num_classes,
                });
            }
        }
        Ok(Self { data, num_classes })
    }

    pub fn filled(height: usize, width: usize, class: u8, num_classes: usize) -> Result<Self, LabelError> {
        Self::new(Array2::from_elem((height, width), class), num_classes)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<u8> {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[[row, col]]
    }

    /// `C × H × W` indicator array; ignore pixels are all-zero columns.
    pub fn one_hot(&self) -> Array3<f64> {
        let mut out = Array3::zeros((self.num_classes, self.height(), self.width()));
        for ((row, col), &value) in self.data.indexed_iter() {
            if value != IGNORE {
                out[[value as usize, row, col]] = 1.0;
            }
        }
        out
    }

    pub fn labeled_pixels(&self) -> usize {
        self.data.iter().filter(|&&v| v != IGNORE).count()
    }

    /// Pixel count per class, ignore excluded.
    pub fn class_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_classes];
        for &v in self.data.iter() {
            if v != IGNORE {
                counts[v as usize] += 1;
            }
        }
        counts
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> LabelMap {
        let data = self
            .data
            .slice(ndarray::s![top..top + height, left..left + width])
            .to_owned();
        LabelMap {
            data,
            num_classes: self.num_classes,
        }
    }
}

/// Per-pixel probabilities over `C` classes, stored `C × H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    data: Array3<f64>,
}

impl ProbMap {
    pub fn new(data: Array3<f64>) -> Result<Self, LabelError> {
        if data.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(LabelError::InvalidProbability);
        }
        let sums = data.sum_axis(Axis(0));
        for ((row, col), &sum) in sums.indexed_iter() {
            if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
                return Err(LabelError::NotNormalized { row, col, sum });
            }
        }
        if data.shape()[0] < 2 {
            return Err(LabelError::InvalidClassCount(data.shape()[0]));
        }
        Ok(Self { data })
    }

    /// Wraps an array the caller has already normalized (softmax output).
    pub(crate) fn from_normalized(data: Array3<f64>) -> Self {
        debug_assert!(Self::new(data.clone()).is_ok());
        Self { data }
    }

    pub fn num_classes(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn view(&self) -> ArrayView3<'_, f64> {
        self.data.view()
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.data
    }
}

/// Rectangular tiling of an image into patches. The last row/column may be
/// partial when the image size is not a multiple of the patch size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch_height: usize,
    pub patch_width: usize,
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    /// Smallest grid of `patch_height × patch_width` cells that covers the image.
    pub fn covering(height: usize, width: usize, patch_height: usize, patch_width: usize) -> Self {
        Self {
            patch_height,
            patch_width,
            rows: height.div_ceil(patch_height),
            cols: width.div_ceil(patch_width),
        }
    }

    pub fn check(&self, height: usize, width: usize) -> Result<(), LabelError> {
        let fits = |n: usize, patch: usize, cells: usize| {
            patch > 0 && cells > 0 && cells * patch >= n && (cells - 1) * patch < n
        };
        if fits(height, self.patch_height, self.rows) && fits(width, self.patch_width, self.cols) {
            Ok(())
        } else {
            Err(LabelError::GridMismatch {
                grid_height: self.rows * self.patch_height,
                grid_width: self.cols * self.patch_width,
                height,
                width,
            })
        }
    }

    /// Pixel bounds `(row_start, row_end, col_start, col_end)` of a cell, clipped to the image.
    pub fn bounds(&self, row: usize, col: usize, height: usize, width: usize) -> (usize, usize, usize, usize) {
        let r0 = row * self.patch_height;
        let c0 = col * self.patch_width;
        (
            r0,
            (r0 + self.patch_height).min(height),
            c0,
            (c0 + self.patch_width).min(width),
        )
    }
}

/// Binary class presence per patch, stored `C × rows × cols`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchClassLabel {
    presence: Array3<u8>,
}

impl PatchClassLabel {
    pub fn from_array(presence: Array3<u8>) -> Result<Self, LabelError> {
        if presence.iter().any(|&v| v > 1) {
            return Err(LabelError::Shape("presence entries must be 0 or 1".into()));
        }
        Ok(Self { presence })
    }

    pub fn num_classes(&self) -> usize {
        self.presence.shape()[0]
    }

    pub fn rows(&self) -> usize {
        self.presence.shape()[1]
    }

    pub fn cols(&self) -> usize {
        self.presence.shape()[2]
    }

    pub fn get(&self, row: usize, col: usize, class: usize) -> bool {
        self.presence[[class, row, col]] == 1
    }

    pub fn presence(&self) -> &Array3<u8> {
        &self.presence
    }

    pub fn as_weights(&self) -> Array3<f64> {
        self.presence.mapv(f64::from)
    }
}

/// Pixels whose top class probability is below the threshold, `H × W`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UncertaintyMask {
    mask: Array2<u8>,
}

impl UncertaintyMask {
    pub fn mask(&self) -> &Array2<u8> {
        &self.mask
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn as_weights(&self) -> Array2<f64> {
        self.mask.mapv(f64::from)
    }
}

/// Presence labels from ground truth: a class is present in a patch when at
/// least one of its pixels falls inside the patch. Ignore pixels are skipped.
pub fn coarse_labels_from_truth(labels: &LabelMap, grid: &PatchGrid) -> Result<PatchClassLabel, LabelError> {
    let (height, width) = (labels.height(), labels.width());
    grid.check(height, width)?;
    let mut presence = Array3::zeros((labels.num_classes(), grid.rows, grid.cols));
    for row in 0..grid.rows {
        for col in 0..grid.cols {
            let (r0, r1, c0, c1) = grid.bounds(row, col, height, width);
            for y in r0..r1 {
                for x in c0..c1 {
                    let v = labels.get(y, x);
                    if v != IGNORE {
                        presence[[v as usize, row, col]] = 1;
                    }
                }
            }
        }
    }
    Ok(PatchClassLabel { presence })
}

/// Presence labels from predictions: class `c` is present in a patch when any
/// pixel there has `P[c] > th_w` (strict).
pub fn coarse_labels_from_prediction(
    probs: &ProbMap,
    grid: &PatchGrid,
    th_w: f64,
) -> Result<PatchClassLabel, LabelError> {
    if !(th_w > 0.0 && th_w < 1.0) {
        return Err(LabelError::InvalidThreshold(th_w));
    }
    let (height, width) = (probs.height(), probs.width());
    grid.check(height, width)?;
    let view = probs.view();
    let mut presence = Array3::zeros((probs.num_classes(), grid.rows, grid.cols));
    for (class, plane) in view.outer_iter().enumerate() {
        for row in 0..grid.rows {
            for col in 0..grid.cols {
                let (r0, r1, c0, c1) = grid.bounds(row, col, height, width);
                let hit = plane
                    .slice(ndarray::s![r0..r1, c0..c1])
                    .iter()
                    .any(|&p| p > th_w);
                if hit {
                    presence[[class, row, col]] = 1;
                }
            }
        }
    }
    Ok(PatchClassLabel { presence })
}

/// Argmax class per pixel; ties go to the smallest class index.
pub fn pseudo_labels(probs: &ProbMap) -> LabelMap {
    let view = probs.view();
    let (num_classes, height, width) = view.dim();
    let mut data = Array2::zeros((height, width));
    for y in 0..height {
        for x in 0..width {
            let mut best = 0usize;
            let mut best_p = view[[0, y, x]];
            for c in 1..num_classes {
                let p = view[[c, y, x]];
                if p > best_p {
                    best = c;
                    best_p = p;
                }
            }
            data[[y, x]] = best as u8;
        }
    }
    LabelMap { data, num_classes }
}

/// `1` where `max_c P < th_n` (strict), `0` elsewhere.
pub fn uncertainty_mask(probs: &ProbMap, th_n: f64) -> Result<UncertaintyMask, LabelError> {
    if !(th_n > 0.0 && th_n <= 1.0) {
        return Err(LabelError::InvalidUncertaintyThreshold(th_n));
    }
    let max = probs
        .view()
        .fold_axis(Axis(0), f64::NEG_INFINITY, |acc, &p| acc.max(p));
    Ok(UncertaintyMask {
        mask: max.mapv(|m| u8::from(m < th_n)),
    })
}

/// One-hot probability map of a label map (ignore pixels are not allowed).
pub fn one_hot_probs(labels: &LabelMap) -> Result<ProbMap, LabelError> {
    ProbMap::new(labels.one_hot())
}
