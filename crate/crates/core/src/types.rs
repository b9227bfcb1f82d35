//! Plain geometry types shared by the geometry kernels and the oracles.
//!
//! Nothing in here computes overlaps; see [`crate::geometry`] for that.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// An augmented view's geometry in source-image pixel coordinates.
///
/// `hflip` records whether the view was mirrored horizontally after
/// cropping; column 0 of a flipped view shows the right edge of the box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub hflip: bool,
}

impl CropBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::with_flip(x, y, w, h, false)
    }

    pub fn with_flip(x: f64, y: f64, w: f64, h: f64, hflip: bool) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || !x.is_finite() || !y.is_finite() || !w.is_finite() || !h.is_finite() {
            return Err(Error::Input(alloc::format!("crop box must have finite position and positive size, got ({x}, {y}, {w}, {h})")));
        }
        Ok(Self { x, y, w, h, hflip })
    }

    pub fn flipped(self) -> Self {
        Self { hflip: !self.hflip, ..self }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn rect(&self) -> Rect {
        Rect { x: self.x, y: self.y, w: self.w, h: self.h }
    }
}

/// Axis-aligned rectangle with real-valued coordinates. Zero-area rects are
/// allowed and stand for "no overlap".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }
}

/// Patch grid of a view: `rows` x `cols` tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn square(side: usize) -> Self {
        Self { rows: side, cols: side }
    }

    /// Grid of a square image split into square patches.
    pub fn for_image(image_side: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 || image_side % patch_size != 0 {
            return Err(Error::Config(alloc::format!("image side {image_side} is not divisible by patch size {patch_size}")));
        }
        Ok(Self::square(image_side / patch_size))
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cell counts `(rows / c, cols / c)` at granularity `c`.
    pub fn cells(&self, c: usize) -> Result<(usize, usize)> {
        if c == 0 || self.rows % c != 0 || self.cols % c != 0 {
            return Err(Error::Config(alloc::format!("granularity {c} does not divide a {}x{} grid", self.rows, self.cols)));
        }
        Ok((self.rows / c, self.cols / c))
    }
}

/// Ordered set of pooling sizes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GranularitySet(Vec<usize>);

impl GranularitySet {
    pub fn new(coefficients: Vec<usize>, grid: PatchGrid) -> Result<Self> {
        if coefficients.is_empty() {
            return Err(Error::Config("granularity set is empty".into()));
        }
        for pair in coefficients.windows(2) {
            if pair[0] >= pair[1] {
                return Err(Error::Config(alloc::format!(
                    "granularities must be strictly increasing without duplicates, got {coefficients:?}"
                )));
            }
        }
        for &c in &coefficients {
            grid.cells(c)?;
        }
        Ok(Self(coefficients))
    }

    /// `{1, 2, 7, 14}` on a 14x14 grid.
    pub fn standard() -> Self {
        Self(alloc::vec![1, 2, 7, 14])
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// One positive key of a query cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyWeight {
    pub s: usize,
    pub t: usize,
    pub weight: f64,
}

/// All positive keys of one query cell `(k, l)` of view 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryCorrespondences {
    pub k: usize,
    pub l: usize,
    pub keys: Vec<KeyWeight>,
}

impl QueryCorrespondences {
    pub fn has_overlap(&self) -> bool {
        !self.keys.is_empty()
    }

    pub fn weight_sum(&self) -> f64 {
        self.keys.iter().map(|k| k.weight).sum()
    }
}

/// Normalized correspondence weights between the cells of two views at one
/// granularity. Queries are stored row-major, one entry per view-1 cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceTable {
    pub c: usize,
    pub rows: usize,
    pub cols: usize,
    pub queries: Vec<QueryCorrespondences>,
}

impl CorrespondenceTable {
    pub fn query(&self, k: usize, l: usize) -> &QueryCorrespondences {
        &self.queries[k * self.cols + l]
    }

    pub fn overlapping(&self) -> impl Iterator<Item = &QueryCorrespondences> {
        self.queries.iter().filter(|q| q.has_overlap())
    }

    pub fn overlapping_count(&self) -> usize {
        self.overlapping().count()
    }

    pub fn weight(&self, k: usize, l: usize, s: usize, t: usize) -> f64 {
        self.query(k, l).keys.iter().find(|e| e.s == s && e.t == t).map_or(0.0, |e| e.weight)
    }

    /// Largest per-entry absolute difference, treating missing entries as 0.
    pub fn max_abs_diff(&self, other: &CorrespondenceTable) -> f64 {
        let mut worst: f64 = 0.0;
        for (a, b) in self.queries.iter().zip(&other.queries) {
            for e in &a.keys {
                worst = worst.max((e.weight - other.weight(b.k, b.l, e.s, e.t)).abs());
            }
            for e in &b.keys {
                worst = worst.max((e.weight - self.weight(a.k, a.l, e.s, e.t)).abs());
            }
        }
        worst
    }
}
