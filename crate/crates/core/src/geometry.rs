//! Multi-grained patch footprints, overlap index ranges, correspondence
//! weights and localization recovery.
//!
//! All coordinates are continuous source-image pixels in `f64`. A cell of
//! granularity `c` merges `c x c` patches of the view's grid. Horizontal
//! flips are handled by mirroring column indices before mapping a cell into
//! source coordinates, so every overlap is measured on un-flipped content.
//!
//! Loops that accumulate over key columns always walk them in source
//! (left-to-right) order, which keeps tables bit-identical under a flip of
//! the key view.

use alloc::vec::Vec;

use crate::math::{ceil, floor};
use crate::types::{CorrespondenceTable, CropBox, KeyWeight, PatchGrid, QueryCorrespondences, Rect};
use crate::{Error, Result};

/// Closed index range `lo..=hi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexRange {
    pub lo: usize,
    pub hi: usize,
}

impl IndexRange {
    pub fn contains(&self, i: usize) -> bool {
        self.lo <= i && i <= self.hi
    }

    pub fn len(&self) -> usize {
        self.hi - self.lo + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn iter(&self) -> core::ops::RangeInclusive<usize> {
        self.lo..=self.hi
    }

    fn mirrored(self, n: usize) -> Self {
        Self { lo: n - 1 - self.hi, hi: n - 1 - self.lo }
    }
}

/// Width and height of one granularity-`c` cell in source pixels.
pub fn patch_footprint(crop: &CropBox, grid: PatchGrid, c: usize) -> Result<(f64, f64)> {
    grid.cells(c)?;
    Ok((crop.w * c as f64 / grid.cols as f64, crop.h * c as f64 / grid.rows as f64))
}

#[inline]
fn mirror(col: usize, cols: usize, hflip: bool) -> usize {
    if hflip {
        cols - 1 - col
    } else {
        col
    }
}

/// `[origin + extent * i / n, origin + extent * (i + 1) / n]`. Multiplying
/// before dividing keeps edges exact whenever the true edge is an integer,
/// so cells of integer crops that touch in exact arithmetic also touch here.
#[inline]
fn span(origin: f64, extent: f64, i: usize, n: usize) -> (f64, f64) {
    (origin + extent * i as f64 / n as f64, origin + extent * (i + 1) as f64 / n as f64)
}

/// Cell edges in source coordinates, source-column order.
#[derive(Debug, Clone, Copy)]
struct Cell {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Cell {
    #[inline]
    fn of(crop: &CropBox, rows: usize, cols: usize, k: usize, col_src: usize) -> Self {
        let (x0, x1) = span(crop.x, crop.w, col_src, cols);
        let (y0, y1) = span(crop.y, crop.h, k, rows);
        Self { x0, x1, y0, y1 }
    }

    fn rect(&self) -> Rect {
        Rect { x: self.x0, y: self.y0, w: self.x1 - self.x0, h: self.y1 - self.y0 }
    }

    #[inline]
    fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    #[inline]
    fn overlap_x(&self, o: &Cell) -> f64 {
        self.x1.min(o.x1) - self.x0.max(o.x0)
    }

    #[inline]
    fn overlap_y(&self, o: &Cell) -> f64 {
        self.y1.min(o.y1) - self.y0.max(o.y0)
    }

    #[inline]
    fn overlap(&self, o: &Cell) -> f64 {
        let (ox, oy) = (self.overlap_x(o), self.overlap_y(o));
        if ox > 0.0 && oy > 0.0 {
            ox * oy
        } else {
            0.0
        }
    }
}

/// Rectangle covered by cell `(k, l)` of a view at granularity `c`.
pub fn patch_rect(crop: &CropBox, grid: PatchGrid, c: usize, k: usize, l: usize) -> Result<Rect> {
    let (rows, cols) = grid.cells(c)?;
    if k >= rows || l >= cols {
        return Err(Error::Index { row: k, col: l, rows, cols });
    }
    Ok(Cell::of(crop, rows, cols, k, mirror(l, cols, crop.hflip)).rect())
}

/// Intersection of two rects, `None` when its area is zero.
pub fn intersect(a: &Rect, b: &Rect) -> Option<Rect> {
    let x0 = a.x.max(b.x);
    let y0 = a.y.max(b.y);
    let x1 = a.right().min(b.right());
    let y1 = a.bottom().min(b.bottom());
    if x1 > x0 && y1 > y0 {
        Some(Rect { x: x0, y: y0, w: x1 - x0, h: y1 - y0 })
    } else {
        None
    }
}

fn intersection_area(a: &Rect, b: &Rect) -> f64 {
    intersect(a, b).map_or(0.0, |r| r.area())
}

/// Overlap of two crops; touching edges count as disjoint.
pub fn overlap_region(crop1: &CropBox, crop2: &CropBox) -> Option<Rect> {
    intersect(&crop1.rect(), &crop2.rect())
}

/// `[floor(lo / step), ceil(hi / step) - 1]` clamped to `0..n`. The ceil
/// bound is exclusive, so one is taken off to make the range closed.
fn closed_range(lo: f64, hi: f64, step: f64, n: usize) -> Option<IndexRange> {
    let first = floor(lo / step).max(0.0);
    let last = (ceil(hi / step) - 1.0).min(n as f64 - 1.0);
    if first > last {
        return None;
    }
    Some(IndexRange { lo: first as usize, hi: last as usize })
}

/// Index ranges of overlapping cells for a crop pair at one granularity.
#[derive(Debug, Clone, Copy)]
pub struct OverlapRanges {
    crop1: CropBox,
    crop2: CropBox,
    size1: (f64, f64),
    size2: (f64, f64),
    cells: (usize, usize),
    /// Rows `k` of view 1 that overlap view 2.
    pub rows: Option<IndexRange>,
    /// Columns `l` of view 1 (view indices) that overlap view 2.
    pub cols: Option<IndexRange>,
}

impl OverlapRanges {
    /// Candidate key ranges `(s, t)` for query `(k, l)`, in view-2 indices.
    pub fn keys_for(&self, k: usize, l: usize) -> Option<(IndexRange, IndexRange)> {
        let (s, t_src) = self.keys_for_src(k, mirror(l, self.cells.1, self.crop1.hflip))?;
        let t = if self.crop2.hflip { t_src.mirrored(self.cells.1) } else { t_src };
        Some((s, t))
    }

    /// Key ranges for a query given in source-column order; the returned
    /// column range is in source-column order too.
    fn keys_for_src(&self, k: usize, l_src: usize) -> Option<(IndexRange, IndexRange)> {
        let (w1, h1) = self.size1;
        let (w2, h2) = self.size2;
        let (rows, cols) = self.cells;
        let top = k as f64 * h1 + self.crop1.y - self.crop2.y;
        let left = l_src as f64 * w1 + self.crop1.x - self.crop2.x;
        let s = closed_range(top, top + h1, h2, rows)?;
        let t = closed_range(left, left + w1, w2, cols)?;
        Some((s, t))
    }
}

/// Floor/ceil index ranges of the cells of view 1 overlapping view 2 and,
/// per query, of the view-2 cells it can overlap. Ranges are candidate
/// supersets: cells touching only along an edge may be included.
pub fn overlap_index_ranges(crop1: &CropBox, crop2: &CropBox, grid: PatchGrid, c: usize) -> Result<OverlapRanges> {
    let cells = grid.cells(c)?;
    let size1 = patch_footprint(crop1, grid, c)?;
    let size2 = patch_footprint(crop2, grid, c)?;
    let (rows, cols) = match overlap_region(crop1, crop2) {
        Some(o) => {
            let rows = closed_range(o.y - crop1.y, o.bottom() - crop1.y, size1.1, cells.0);
            let cols = closed_range(o.x - crop1.x, o.right() - crop1.x, size1.0, cells.1)
                .map(|r| if crop1.hflip { r.mirrored(cells.1) } else { r });
            (rows, cols)
        }
        None => (None, None),
    };
    Ok(OverlapRanges { crop1: *crop1, crop2: *crop2, size1, size2, cells, rows, cols })
}

/// Relative overlap score `S(a ∩ b) / (S(a) + S(b))`.
pub fn relative_overlap_score(a: &Rect, b: &Rect) -> f64 {
    let inter = intersection_area(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area())
}

fn build_table(
    crop1: &CropBox,
    crop2: &CropBox,
    grid: PatchGrid,
    c: usize,
    score: impl Fn(&Cell, &Cell) -> f64,
) -> Result<CorrespondenceTable> {
    let ranges = overlap_index_ranges(crop1, crop2, grid, c)?;
    let (rows, cols) = ranges.cells;
    let mut queries = Vec::with_capacity(rows * cols);
    for k in 0..rows {
        for l in 0..cols {
            let l_src = mirror(l, cols, crop1.hflip);
            let query = Cell::of(crop1, rows, cols, k, l_src);
            let mut keys = Vec::new();
            if let Some((s_range, t_range)) = ranges.keys_for_src(k, l_src) {
                for s in s_range.iter() {
                    for t_src in t_range.iter() {
                        let key = Cell::of(crop2, rows, cols, s, t_src);
                        let weight = score(&query, &key);
                        if weight > 0.0 {
                            keys.push(KeyWeight { s, t: mirror(t_src, cols, crop2.hflip), weight });
                        }
                    }
                }
            }
            let total: f64 = keys.iter().map(|e| e.weight).sum();
            for e in &mut keys {
                e.weight /= total;
            }
            queries.push(QueryCorrespondences { k, l, keys });
        }
    }
    Ok(CorrespondenceTable { c, rows, cols, queries })
}

/// Correspondence weights: for each query cell of view 1, the overlap area
/// with each key cell of view 2 normalized over all keys. Queries that do
/// not overlap view 2 get an empty key list.
pub fn correspondence_weights(crop1: &CropBox, crop2: &CropBox, grid: PatchGrid, c: usize) -> Result<CorrespondenceTable> {
    build_table(crop1, crop2, grid, c, Cell::overlap)
}

/// Same table normalized from [`relative_overlap_score`] instead of raw
/// areas. Key cells of one view share a size, so both routes agree.
pub fn correspondence_weights_relative(
    crop1: &CropBox,
    crop2: &CropBox,
    grid: PatchGrid,
    c: usize,
) -> Result<CorrespondenceTable> {
    build_table(crop1, crop2, grid, c, |a, b| {
        let inter = a.overlap(b);
        if inter == 0.0 {
            0.0
        } else {
            inter / (a.area() + b.area())
        }
    })
}

/// Overlap-area shares of the view-1 cells covering one key cell of view 2.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeRatios {
    /// View-1 rows overlapping the key, top to bottom.
    pub rows: Vec<usize>,
    /// View-1 columns (view indices) overlapping the key, left to right in
    /// source coordinates.
    pub cols: Vec<usize>,
    /// Width shares along the first overlapping row.
    pub e_w: Vec<f64>,
    /// Height shares along the first overlapping column.
    pub e_h: Vec<f64>,
}

struct KeyCover {
    key: Cell,
    rows: IndexRange,
    cols_src: IndexRange,
    w1: f64,
    h1: f64,
    n_rows: usize,
    cols: usize,
}

fn key_cover(crop1: &CropBox, crop2: &CropBox, grid: PatchGrid, c: usize, key: (usize, usize)) -> Result<KeyCover> {
    let (rows, cols) = grid.cells(c)?;
    if key.0 >= rows || key.1 >= cols {
        return Err(Error::Index { row: key.0, col: key.1, rows, cols });
    }
    let key_cell = Cell::of(crop2, rows, cols, key.0, mirror(key.1, cols, crop2.hflip));
    let (w1, h1) = patch_footprint(crop1, grid, c)?;
    let rows_r = closed_range(key_cell.y0 - crop1.y, key_cell.y1 - crop1.y, h1, rows);
    let cols_r = closed_range(key_cell.x0 - crop1.x, key_cell.x1 - crop1.x, w1, cols);
    let (Some(mut rows_r), Some(mut cols_r)) = (rows_r, cols_r) else {
        return Err(Error::NoOverlapAtKey(key.0, key.1));
    };
    // trim candidates that only touch the key along an edge
    let row_overlaps = |k: usize| Cell::of(crop1, rows, cols, k, 0).overlap_y(&key_cell) > 0.0;
    let col_overlaps = |l: usize| Cell::of(crop1, rows, cols, 0, l).overlap_x(&key_cell) > 0.0;
    while rows_r.lo < rows_r.hi && !row_overlaps(rows_r.lo) {
        rows_r.lo += 1;
    }
    while rows_r.hi > rows_r.lo && !row_overlaps(rows_r.hi) {
        rows_r.hi -= 1;
    }
    while cols_r.lo < cols_r.hi && !col_overlaps(cols_r.lo) {
        cols_r.lo += 1;
    }
    while cols_r.hi > cols_r.lo && !col_overlaps(cols_r.hi) {
        cols_r.hi -= 1;
    }
    if !row_overlaps(rows_r.lo) || !col_overlaps(cols_r.lo) {
        return Err(Error::NoOverlapAtKey(key.0, key.1));
    }
    Ok(KeyCover { key: key_cell, rows: rows_r, cols_src: cols_r, w1, h1, n_rows: rows, cols })
}

fn shares(areas: Vec<f64>) -> Vec<f64> {
    let total: f64 = areas.iter().sum();
    areas.into_iter().map(|a| a / total).collect()
}

/// Area shares of the view-1 cells that split key cell `key` of view 2,
/// along its width (first overlapping row) and its height (first
/// overlapping column).
pub fn edge_ratios(crop1: &CropBox, crop2: &CropBox, grid: PatchGrid, c: usize, key: (usize, usize)) -> Result<EdgeRatios> {
    let cover = key_cover(crop1, crop2, grid, c, key)?;
    Ok(ratios_from_cover(crop1, &cover))
}

fn ratios_from_cover(crop1: &CropBox, cover: &KeyCover) -> EdgeRatios {
    let KeyCover { key, rows, cols_src, n_rows, cols, .. } = cover;
    let row_areas = cols_src.iter().map(|l| Cell::of(crop1, *n_rows, *cols, rows.lo, l).overlap(key)).collect();
    let col_areas = rows.iter().map(|k| Cell::of(crop1, *n_rows, *cols, k, cols_src.lo).overlap(key)).collect();
    EdgeRatios {
        rows: rows.iter().collect(),
        cols: cols_src.iter().map(|l| mirror(l, *cols, crop1.hflip)).collect(),
        e_w: shares(row_areas),
        e_h: shares(col_areas),
    }
}

/// One view-1 cell located from the area ratios inside a key cell.
///
/// Coordinates are source pixels relative to the top-left corner of view
/// 2's crop box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizedCell {
    pub k: usize,
    pub l: usize,
    pub x: f64,
    pub y: f64,
    pub true_x: f64,
    pub true_y: f64,
    /// View 1 spans the key horizontally and the cell's right edge lies
    /// inside it, so `x` is exact.
    pub valid_x: bool,
    /// Vertical counterpart of `valid_x`.
    pub valid_y: bool,
}

impl LocalizedCell {
    pub fn error_x(&self) -> f64 {
        (self.x - self.true_x).abs()
    }

    pub fn error_y(&self) -> f64 {
        (self.y - self.true_y).abs()
    }
}

/// Recovers the left/top edges of the view-1 cells overlapping key cell
/// `key = (u', v')` of view 2 from the [`edge_ratios`] alone:
/// `x_j = (v' + sum_{i<=j} e_w[i]) * w2 - w1`, and likewise for `y`.
///
/// The recovery is exact only when view 1 spans the key along an axis and
/// the cell's far edge ends inside the key; other entries are flagged
/// invalid instead of clipped.
pub fn localize(crop1: &CropBox, crop2: &CropBox, grid: PatchGrid, c: usize, key: (usize, usize)) -> Result<Vec<LocalizedCell>> {
    let cover = key_cover(crop1, crop2, grid, c, key)?;
    let ratios = ratios_from_cover(crop1, &cover);
    let (w2, h2) = patch_footprint(crop2, grid, c)?;
    let (w1, h1) = (cover.w1, cover.h1);
    let key_col_src = mirror(key.1, cover.cols, crop2.hflip) as f64;
    let key_row = key.0 as f64;

    let mut xs = Vec::with_capacity(ratios.e_w.len());
    let mut acc = 0.0;
    for e in &ratios.e_w {
        acc += e;
        xs.push((key_col_src + acc) * w2 - w1);
    }
    let mut ys = Vec::with_capacity(ratios.e_h.len());
    acc = 0.0;
    for e in &ratios.e_h {
        acc += e;
        ys.push((key_row + acc) * h2 - h1);
    }

    let key_cell = cover.key;
    let tol = 1e-9 * (1.0 + key_cell.x1.abs().max(key_cell.y1.abs()));
    // shares are normalized over the covered part of the key, so they only
    // measure key-relative offsets when view 1 spans the whole key
    let spans_x = crop1.x <= key_cell.x0 + tol && crop1.x + crop1.w >= key_cell.x1 - tol;
    let spans_y = crop1.y <= key_cell.y0 + tol && crop1.y + crop1.h >= key_cell.y1 - tol;
    let mut out = Vec::with_capacity(xs.len() * ys.len());
    for (i, k) in cover.rows.iter().enumerate() {
        for (j, l_src) in cover.cols_src.iter().enumerate() {
            let cell = Cell::of(crop1, cover.n_rows, cover.cols, k, l_src);
            out.push(LocalizedCell {
                k,
                l: mirror(l_src, cover.cols, crop1.hflip),
                x: xs[j],
                y: ys[i],
                true_x: cell.x0 - crop2.x,
                true_y: cell.y0 - crop2.y,
                valid_x: spans_x && cell.x1 <= key_cell.x1 + tol,
                valid_y: spans_y && cell.y1 <= key_cell.y1 + tol,
            });
        }
    }
    Ok(out)
}
