//! Brute-force reference implementations for cross-checking.
//!
//! These paths are deliberately slow and share no code with the geometry
//! or contrast kernels: only the plain types from [`crate::types`] and the
//! dense [`Matrix`] container are imported here. Cells are placed by
//! mapping their fraction of the crop into source coordinates (instead of
//! mirroring indices), overlap is measured by interval clipping or by
//! counting sub-pixel samples, and tables come from exhaustive loops over
//! every cell pair.

use alloc::string::String;
use alloc::vec::Vec;

use crate::tensor::Matrix;
use crate::types::{CorrespondenceTable, CropBox, KeyWeight, PatchGrid, QueryCorrespondences, Rect};

/// Sub-pixel sample spacing for the rasterizing oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterSpec {
    pub cell: f64,
}

impl Default for RasterSpec {
    fn default() -> Self {
        Self { cell: 0.25 }
    }
}

/// `max(0, overlap_x) * max(0, overlap_y)`.
pub fn exact_overlap_area(r1: &Rect, r2: &Rect) -> f64 {
    let ox = (r1.x + r1.w).min(r2.x + r2.w) - r1.x.max(r2.x);
    let oy = (r1.y + r1.h).min(r2.y + r2.h) - r1.y.max(r2.y);
    if ox <= 0.0 || oy <= 0.0 {
        0.0
    } else {
        ox * oy
    }
}

/// Source-space interval covered by cell `index` of `count` along an axis
/// of length `extent` starting at `origin`, reversed when `mirrored`.
fn axis_interval(origin: f64, extent: f64, index: usize, count: usize, mirrored: bool) -> (f64, f64) {
    // position `i` of `count` equal steps, multiplied before dividing
    let at = |i: usize| origin + extent * i as f64 / count as f64;
    if mirrored {
        (at(count - index - 1), at(count - index))
    } else {
        (at(index), at(index + 1))
    }
}

fn cell(crop: &CropBox, rows: usize, cols: usize, k: usize, l: usize) -> Rect {
    let (x0, x1) = axis_interval(crop.x, crop.w, l, cols, crop.hflip);
    let (y0, y1) = axis_interval(crop.y, crop.h, k, rows, false);
    Rect { x: x0, y: y0, w: x1 - x0, h: y1 - y0 }
}

fn normalize_rows(rows: usize, cols: usize, c: usize, areas: impl Fn(usize, usize, usize, usize) -> f64) -> CorrespondenceTable {
    let mut queries = Vec::with_capacity(rows * cols);
    for k in 0..rows {
        for l in 0..cols {
            let mut keys = Vec::new();
            let mut total = 0.0;
            for s in 0..rows {
                for t in 0..cols {
                    let a = areas(k, l, s, t);
                    if a > 0.0 {
                        total += a;
                        keys.push(KeyWeight { s, t, weight: a });
                    }
                }
            }
            for key in &mut keys {
                key.weight /= total;
            }
            queries.push(QueryCorrespondences { k, l, keys });
        }
    }
    CorrespondenceTable { c, rows, cols, queries }
}

/// Exhaustive correspondence table: every query cell against every key
/// cell, exact interval-clipped areas, normalized per query.
///
/// Panics if `c` does not divide the grid.
pub fn brute_correspondences(crop1: &CropBox, crop2: &CropBox, grid: PatchGrid, c: usize) -> CorrespondenceTable {
    assert!(grid.rows % c == 0 && grid.cols % c == 0, "granularity must divide the grid");
    let (rows, cols) = (grid.rows / c, grid.cols / c);
    normalize_rows(rows, cols, c, |k, l, s, t| {
        exact_overlap_area(&cell(crop1, rows, cols, k, l), &cell(crop2, rows, cols, s, t))
    })
}

/// Number of sample centers `origin + (i + 0.5) * step` inside both
/// half-open intervals `[a0, a1)` and `[b0, b1)`.
fn count_samples(a0: f64, a1: f64, b0: f64, b1: f64, step: f64) -> usize {
    let lo = a0.max(b0);
    let hi = a1.min(b1);
    if hi <= lo {
        return 0;
    }
    // walk the lattice anchored at 0 from just below `lo`
    let mut i = libm::floor(lo / step) as i64 - 1;
    let mut n = 0;
    loop {
        let x = (i as f64 + 0.5) * step;
        if x >= hi {
            break;
        }
        if x >= lo {
            n += 1;
        }
        i += 1;
    }
    n
}

/// Rasterized correspondence table: overlap measured by counting sub-pixel
/// sample points on a `spec.cell` lattice that fall inside both cells.
///
/// Cells are axis-aligned, so a sample lies in both cells exactly when its
/// x lies in both x-intervals and its y in both y-intervals; the 2-D count
/// is the product of the two 1-D counts and is tabulated per axis.
pub fn raster_correspondences(crop1: &CropBox, crop2: &CropBox, grid: PatchGrid, c: usize, spec: RasterSpec) -> CorrespondenceTable {
    assert!(grid.rows % c == 0 && grid.cols % c == 0, "granularity must divide the grid");
    assert!(spec.cell > 0.0, "raster cell must be positive");
    let (rows, cols) = (grid.rows / c, grid.cols / c);
    let mut cx = alloc::vec![0usize; cols * cols];
    for l in 0..cols {
        let (a0, a1) = axis_interval(crop1.x, crop1.w, l, cols, crop1.hflip);
        for t in 0..cols {
            let (b0, b1) = axis_interval(crop2.x, crop2.w, t, cols, crop2.hflip);
            cx[l * cols + t] = count_samples(a0, a1, b0, b1, spec.cell);
        }
    }
    let mut cy = alloc::vec![0usize; rows * rows];
    for k in 0..rows {
        let (a0, a1) = axis_interval(crop1.y, crop1.h, k, rows, false);
        for s in 0..rows {
            let (b0, b1) = axis_interval(crop2.y, crop2.h, s, rows, false);
            cy[k * rows + s] = count_samples(a0, a1, b0, b1, spec.cell);
        }
    }
    let unit = spec.cell * spec.cell;
    normalize_rows(rows, cols, c, |k, l, s, t| (cx[l * cols + t] * cy[k * rows + s]) as f64 * unit)
}

/// Dense cross-entropy reference for one granularity: straight loops over
/// query rows, all key rows and the target list, with cosine similarity
/// recomputed from scratch.
pub fn dense_soft_target_loss(q: &Matrix, z: &Matrix, targets: &[Vec<(usize, f64)>], tau: f64, n_images: usize) -> f64 {
    let norm = |m: &Matrix, r: usize| libm::sqrt(m.row(r).iter().map(|v| v * v).sum::<f64>());
    let mut loss = 0.0;
    for (i, row_targets) in targets.iter().enumerate() {
        let qn = norm(q, i);
        let logits: Vec<f64> = (0..z.rows)
            .map(|j| {
                let dot: f64 = q.row(i).iter().zip(z.row(j)).map(|(a, b)| a * b).sum();
                dot / (qn * norm(z, j)) / tau
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_denominator = max + libm::log(logits.iter().map(|x| libm::exp(x - max)).sum::<f64>());
        for &(j, w) in row_targets {
            loss -= w * (logits[j] - log_denominator);
        }
    }
    loss / n_images as f64
}

/// Finite-difference check settings.
#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Number of coordinates to perturb (at least 200 is recommended).
    pub samples: usize,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-5, samples: 200, seed: 0, tolerance: 1e-5 }
    }
}

/// One evaluation of the function under test.
///
/// `signature` identifies the active piece of a piecewise-smooth function
/// (for example a hash of ReLU on/off patterns). Coordinates whose central
/// stencil straddles two pieces have no meaningful finite difference and
/// are replaced by another sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    pub signature: u64,
}

impl From<f64> for Evaluation {
    fn from(value: f64) -> Self {
        Self { value, signature: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: Vec<CheckedCoordinate>,
    /// Coordinates skipped because the stencil crossed a kink.
    pub skipped: Vec<usize>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckedCoordinate {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GradCheckError {
    #[error("non-finite value at parameter {index}: {detail}")]
    NonFinite { index: usize, detail: String },
    #[error("analytic gradient has {got} entries, expected {expected}")]
    Length { got: usize, expected: usize },
}

/// `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Central finite-difference check of `analytic` (the gradient of `f` at
/// `params`) on a seeded random subset of coordinates.
pub fn fd_gradient_check<E: Into<Evaluation>>(
    mut f: impl FnMut(&[f64]) -> E,
    params: &[f64],
    analytic: &[f64],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, GradCheckError> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    if analytic.len() != params.len() {
        return Err(GradCheckError::Length { got: analytic.len(), expected: params.len() });
    }
    let mut order: Vec<usize> = (0..params.len()).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);
    order.shuffle(&mut rng);

    let center = f(params).into();
    if !center.value.is_finite() {
        return Err(GradCheckError::NonFinite { index: usize::MAX, detail: "value at the base point".into() });
    }
    let mut work = params.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_index: None, checked: Vec::new(), skipped: Vec::new() };
    for &index in &order {
        if report.checked.len() >= opts.samples {
            break;
        }
        let g = analytic[index];
        if !g.is_finite() {
            return Err(GradCheckError::NonFinite { index, detail: alloc::format!("analytic gradient {g}") });
        }
        work[index] = params[index] + opts.eps;
        let plus = f(&work).into();
        work[index] = params[index] - opts.eps;
        let minus = f(&work).into();
        work[index] = params[index];
        if !plus.value.is_finite() || !minus.value.is_finite() {
            return Err(GradCheckError::NonFinite { index, detail: alloc::format!("f(+eps) = {}, f(-eps) = {}", plus.value, minus.value) });
        }
        if plus.signature != center.signature || minus.signature != center.signature {
            report.skipped.push(index);
            continue;
        }
        let numeric = (plus.value - minus.value) / (2.0 * opts.eps);
        let rel_error = relative_error(g, numeric);
        if report.worst_index.is_none() || rel_error > report.max_rel_error {
            report.max_rel_error = rel_error;
            report.worst_index = Some(index);
        }
        report.checked.push(CheckedCoordinate { index, analytic: g, numeric, rel_error });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlap_areas() {
        let a = Rect::new(0.0, 0.0, 16.0, 16.0);
        assert_eq!(exact_overlap_area(&a, &Rect::new(8.0, 0.0, 16.0, 16.0)), 128.0);
        assert_eq!(exact_overlap_area(&a, &Rect::new(16.0, 0.0, 16.0, 16.0)), 0.0);
        let r = Rect::new(3.25, -7.5, 11.0, 2.5);
        assert_eq!(exact_overlap_area(&r, &r), 27.5);
    }

    #[test]
    fn brute_identity_and_shift() {
        let grid = PatchGrid::square(14);
        let full = CropBox::new(0.0, 0.0, 224.0, 224.0).unwrap();
        for c in [1, 2, 7, 14] {
            let t = brute_correspondences(&full, &full, grid, c);
            assert!(t.queries.iter().all(|q| q.keys == [KeyWeight { s: q.k, t: q.l, weight: 1.0 }]));
        }
        let shifted = CropBox::new(8.0, 0.0, 224.0, 224.0).unwrap();
        let t = brute_correspondences(&full, &shifted, grid, 1);
        assert_eq!(t.weight(0, 1, 0, 0), 0.5);
        assert_eq!(t.weight(0, 1, 0, 1), 0.5);
    }

    #[test]
    fn raster_counts() {
        assert_eq!(count_samples(0.0, 1.0, 0.0, 1.0, 0.25), 4);
        assert_eq!(count_samples(0.1, 0.2, 0.0, 1.0, 0.25), 1);
        assert_eq!(count_samples(0.13, 0.24, 0.0, 1.0, 0.25), 0);
        assert_eq!(count_samples(0.1, 0.2, 0.0, 1.0, 0.05), 2);
        assert_eq!(count_samples(-1.0, 1.0, -5.0, 5.0, 0.25), 8);
        let grid = PatchGrid::square(14);
        let full = CropBox::new(0.0, 0.0, 224.0, 224.0).unwrap();
        let half = CropBox::new(0.0, 0.0, 112.0, 112.0).unwrap();
        let t = raster_correspondences(&full, &half, grid, 1, RasterSpec::default());
        assert_eq!(t.weight(0, 0, 1, 1), 0.25);
    }

    #[test]
    fn quadratic_calibration() {
        let params = [1.0; 5];
        let grad = [2.0; 5];
        let opts = GradCheckOptions { samples: 5, ..Default::default() };
        let r = fd_gradient_check(|p: &[f64]| p.iter().map(|x| x * x).sum::<f64>(), &params, &grad, &opts).unwrap();
        assert_eq!(r.checked.len(), 5);
        assert!(r.max_rel_error <= 1e-9, "{}", r.max_rel_error);
        for c in &r.checked {
            assert!((c.numeric - 2.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let params = [0.3, -2.0, 7.0];
        let opts = GradCheckOptions { samples: 3, ..Default::default() };
        let r = fd_gradient_check(|_: &[f64]| 4.0, &params, &[0.0; 3], &opts).unwrap();
        for c in &r.checked {
            assert!(c.numeric.abs() <= opts.eps * opts.eps);
        }
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn wrong_gradient_is_reported() {
        let params = [1.0, 2.0];
        let opts = GradCheckOptions { samples: 2, ..Default::default() };
        let r = fd_gradient_check(|p: &[f64]| p[0] * p[1], &params, &[2.0, 5.0], &opts).unwrap();
        assert_eq!(r.worst_index, Some(1));
        assert!(!r.passed(1e-5));
    }

    #[test]
    fn non_finite_values_name_the_parameter() {
        let params = [1.0, 0.0];
        let opts = GradCheckOptions { samples: 2, eps: 1e-5, ..Default::default() };
        let err = fd_gradient_check(|p: &[f64]| if p[1] > 0.0 { f64::NAN } else { 0.0 }, &params, &[0.0, 0.0], &opts).unwrap_err();
        assert!(matches!(err, GradCheckError::NonFinite { index: 1, .. }));
    }

    #[test]
    fn kink_crossings_are_skipped() {
        let params = [0.0, 1.0];
        let opts = GradCheckOptions { samples: 2, ..Default::default() };
        let relu = |p: &[f64]| Evaluation { value: p[0].max(0.0) + p[1], signature: (p[0] > 0.0) as u64 };
        let r = fd_gradient_check(relu, &params, &[0.0, 1.0], &opts).unwrap();
        assert_eq!(r.skipped, [0]);
        assert_eq!(r.checked.len(), 1);
    }
}
