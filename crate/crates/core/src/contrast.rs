//! Multi-grained aggregation, sparse cell sampling and the soft-target
//! contrastive objective.
//!
//! Pooling and row selection are constant left multiplications, so the
//! same code path serves plain values and graph nodes.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::math::sqrt;
use crate::model::FeatureMap;
use crate::tensor::Matrix;
use crate::types::{CorrespondenceTable, PatchGrid};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
    /// `(granularity, sampled query count)` in increasing granularity.
    pub counts: Vec<(usize, usize)>,
    pub symmetrize: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { temperature: 0.2, counts: vec![(1, 10), (2, 10), (7, 2), (14, 1)], symmetrize: false }
    }
}

impl LossConfig {
    pub fn validate(&self, grid: PatchGrid) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.counts.is_empty() {
            return Err(Error::Config("no granularities configured".into()));
        }
        for w in self.counts.windows(2) {
            if w[0].0 >= w[1].0 {
                return Err(Error::Config("granularities must be strictly increasing".into()));
            }
        }
        for &(c, n) in &self.counts {
            grid.cells(c)?;
            if n == 0 {
                return Err(Error::Config(format!("sample count for granularity {c} must be positive")));
            }
        }
        Ok(())
    }

    pub fn granularities(&self) -> Vec<usize> {
        self.counts.iter().map(|&(c, _)| c).collect()
    }

    pub fn count_for(&self, c: usize) -> Option<usize> {
        self.counts.iter().find(|&&(g, _)| g == c).map(|&(_, n)| n)
    }
}

/// A feature map mean-pooled over `c x c` windows.
#[derive(Debug, Clone, PartialEq)]
pub struct GranularityFeatures {
    pub c: usize,
    pub rows: usize,
    pub cols: usize,
    /// `rows*cols x D`, row-major over the pooled grid.
    pub data: Matrix,
}

/// Pooling weights: row `k * (V/c) + l` averages the `c x c` block of
/// cell `(k, l)` over a row-major `U*V` token list.
pub fn selection_matrix(grid: PatchGrid, c: usize, cells: &[(usize, usize)]) -> Result<Matrix> {
    let (rows, cols) = grid.cells(c)?;
    let mut m = Matrix::zeros(cells.len(), grid.len());
    let w = 1.0 / (c * c) as f64;
    for (r, &(k, l)) in cells.iter().enumerate() {
        if k >= rows || l >= cols {
            return Err(Error::Index { row: k, col: l, rows, cols });
        }
        for u in k * c..(k + 1) * c {
            for v in l * c..(l + 1) * c {
                m.set(r, u * grid.cols + v, w);
            }
        }
    }
    Ok(m)
}

/// Pooling matrix over every cell of the granularity-`c` grid.
pub fn pooling_matrix(grid: PatchGrid, c: usize) -> Result<Matrix> {
    let (rows, cols) = grid.cells(c)?;
    let cells: Vec<(usize, usize)> = (0..rows).flat_map(|k| (0..cols).map(move |l| (k, l))).collect();
    selection_matrix(grid, c, &cells)
}

/// Non-overlapping `c x c` mean pooling with stride `c`.
pub fn aggregate(features: &FeatureMap, c: usize) -> Result<GranularityFeatures> {
    let (rows, cols) = features.grid.cells(c)?;
    let mut data = Matrix::zeros(rows * cols, features.dim());
    let n = (c * c) as f64;
    for k in 0..rows {
        for l in 0..cols {
            let out = data.row_mut(k * cols + l);
            for u in k * c..(k + 1) * c {
                for v in l * c..(l + 1) * c {
                    for (o, x) in out.iter_mut().zip(features.get(u, v)) {
                        *o += x;
                    }
                }
            }
            for o in out.iter_mut() {
                *o /= n;
            }
        }
    }
    Ok(GranularityFeatures { c, rows, cols, data })
}

/// Sampled query cells and their key support at one granularity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GranularitySample {
    pub c: usize,
    pub queries: Vec<(usize, usize)>,
    /// Every key with nonzero weight for some sampled query, sorted.
    pub keys: Vec<(usize, usize)>,
}

/// Per-granularity samples of one image.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SparseSample {
    pub granularities: Vec<GranularitySample>,
}

impl SparseSample {
    pub fn get(&self, c: usize) -> Option<&GranularitySample> {
        self.granularities.iter().find(|s| s.c == c)
    }
}

/// Draws `counts[c]` overlapping query cells per table, uniformly without
/// replacement (all of them when fewer exist), and collects their keys.
/// A table without overlapping queries yields an empty sample.
pub fn sample_sparse<R: Rng + ?Sized>(tables: &[CorrespondenceTable], counts: &[(usize, usize)], rng: &mut R) -> Result<SparseSample> {
    let mut out = SparseSample::default();
    for table in tables {
        let count = counts
            .iter()
            .find(|&&(c, _)| c == table.c)
            .map(|&(_, n)| n)
            .ok_or_else(|| Error::Config(format!("no sample count for granularity {}", table.c)))?;
        let candidates: Vec<(usize, usize)> = table.overlapping().map(|q| (q.k, q.l)).collect();
        let n = count.min(candidates.len());
        let mut picked = rand::seq::index::sample(rng, candidates.len(), n).into_vec();
        picked.sort_unstable();
        let queries: Vec<(usize, usize)> = picked.into_iter().map(|i| candidates[i]).collect();
        let mut keys = BTreeSet::new();
        for &(k, l) in &queries {
            for kw in &table.query(k, l).keys {
                if kw.weight > 0.0 {
                    keys.insert((kw.s, kw.t));
                }
            }
        }
        out.granularities.push(GranularitySample { c: table.c, queries, keys: keys.into_iter().collect() });
    }
    Ok(out)
}

/// Cosine similarity.
pub fn similarity(q: &[f64], z: &[f64]) -> Result<f64> {
    if q.len() != z.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", q.len(), z.len())));
    }
    let qq: f64 = q.iter().map(|v| v * v).sum();
    let zz: f64 = z.iter().map(|v| v * v).sum();
    if qq == 0.0 || zz == 0.0 {
        return Err(Error::ZeroVector);
    }
    let dot: f64 = q.iter().zip(z).map(|(a, b)| a * b).sum();
    Ok((dot / sqrt(qq * zz)).clamp(-1.0, 1.0))
}

/// Query rows, key rows and soft targets of one granularity across a
/// batch. Key rows of all images share one softmax denominator.
#[derive(Debug, Clone, PartialEq)]
pub struct GranularityTargets {
    pub c: usize,
    /// `(image, k, l)` per query row.
    pub query_rows: Vec<(usize, usize, usize)>,
    /// `(image, s, t)` per key row.
    pub key_rows: Vec<(usize, usize, usize)>,
    /// `(key row, weight)` per query row.
    pub targets: Vec<Vec<(usize, f64)>>,
}

/// Lays out queries and keys of granularity `c` for a batch; `tables[i]`
/// and `samples[i]` belong to image `i`.
pub fn build_targets(c: usize, tables: &[&CorrespondenceTable], samples: &[&SparseSample]) -> Result<GranularityTargets> {
    if tables.len() != samples.len() {
        return Err(Error::Targets(format!("{} tables for {} samples", tables.len(), samples.len())));
    }
    let mut out = GranularityTargets { c, query_rows: Vec::new(), key_rows: Vec::new(), targets: Vec::new() };
    for (image, (table, sample)) in tables.iter().zip(samples).enumerate() {
        if table.c != c {
            return Err(Error::Targets(format!("table of granularity {} where {c} was expected", table.c)));
        }
        let Some(gs) = sample.get(c) else { continue };
        let offset = out.key_rows.len();
        let mut position = BTreeMap::new();
        for (i, &(s, t)) in gs.keys.iter().enumerate() {
            position.insert((s, t), offset + i);
            out.key_rows.push((image, s, t));
        }
        for &(k, l) in &gs.queries {
            let mut row = Vec::new();
            for kw in &table.query(k, l).keys {
                if kw.weight == 0.0 {
                    continue;
                }
                let j = position.get(&(kw.s, kw.t)).ok_or_else(|| {
                    Error::Targets(format!("key ({}, {}) of query ({k}, {l}) missing from the support", kw.s, kw.t))
                })?;
                row.push((*j, kw.weight));
            }
            out.query_rows.push((image, k, l));
            out.targets.push(row);
        }
    }
    Ok(out)
}

/// Checks that every target row is a distribution over existing keys.
pub fn validate_targets(targets: &[Vec<(usize, f64)>], n_keys: usize) -> Result<()> {
    for (r, row) in targets.iter().enumerate() {
        let mut sum = 0.0;
        for &(j, w) in row {
            if j >= n_keys {
                return Err(Error::Targets(format!("query {r} targets key {j} of {n_keys}")));
            }
            if !(w >= 0.0) {
                return Err(Error::Targets(format!("query {r} has weight {w}")));
            }
            sum += w;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Targets(format!("weights of query {r} sum to {sum}")));
        }
    }
    Ok(())
}

/// Soft-target cross entropy of cosine logits `sim(q, z) / tau`, averaged
/// over `n_images`. `z` should already be detached by the caller.
pub fn loss_granularity_graph(g: &mut Graph, q: Var, z: Var, targets: Vec<Vec<(usize, f64)>>, tau: f64, n_images: usize) -> Result<Var> {
    let (nq, nk) = (g.value(q).rows, g.value(z).rows);
    if targets.len() != nq {
        return Err(Error::Targets(format!("{} target rows for {nq} queries", targets.len())));
    }
    if g.value(q).cols != g.value(z).cols {
        return Err(Error::Shape(format!("query dim {} vs key dim {}", g.value(q).cols, g.value(z).cols)));
    }
    validate_targets(&targets, nk)?;
    if g.min_row_norm(q) == 0.0 || g.min_row_norm(z) == 0.0 {
        return Err(Error::ZeroVector);
    }
    let qn = g.normalize_rows(q);
    let zn = g.normalize_rows(z);
    let sims = g.matmul_nt(qn, zn);
    let logits = g.scale(sims, 1.0 / tau);
    Ok(g.soft_target_xent(logits, targets, 1.0 / n_images as f64))
}

/// Value-level [`loss_granularity_graph`].
pub fn loss_granularity(q: &Matrix, z: &Matrix, targets: &[Vec<(usize, f64)>], tau: f64, n_images: usize) -> Result<f64> {
    let mut g = Graph::new();
    let qv = g.constant(q.clone());
    let zv = g.constant(z.clone());
    let loss = loss_granularity_graph(&mut g, qv, zv, targets.to_vec(), tau, n_images)?;
    Ok(g.scalar(loss))
}

/// Query and key nodes of one granularity, ready for the loss.
#[derive(Debug, Clone)]
pub struct GranularityTerm {
    pub c: usize,
    pub q: Var,
    pub z: Var,
    pub targets: Vec<Vec<(usize, f64)>>,
}

/// Loss node and per-granularity values.
#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub loss: Var,
    pub per_granularity: Vec<(usize, f64)>,
}

/// Sum over granularities of the per-granularity losses, with every key
/// detached; several directions (view 1 to 2 and back) are averaged.
/// Granularities without queries contribute nothing.
pub fn total_loss(g: &mut Graph, directions: &[Vec<GranularityTerm>], tau: f64, n_images: usize) -> Result<TotalLoss> {
    if directions.is_empty() {
        return Err(Error::Targets("no loss directions".into()));
    }
    let mut parts = Vec::new();
    let mut per: Vec<(usize, f64)> = Vec::new();
    let weight = 1.0 / directions.len() as f64;
    for terms in directions {
        for term in terms {
            if term.targets.is_empty() {
                continue;
            }
            let z = g.stop_grad(term.z);
            let l = loss_granularity_graph(g, term.q, z, term.targets.clone(), tau, n_images)?;
            let value = g.scalar(l) * weight;
            match per.iter_mut().find(|(c, _)| *c == term.c) {
                Some(entry) => entry.1 += value,
                None => per.push((term.c, value)),
            }
            parts.push(l);
        }
    }
    let loss = if parts.is_empty() {
        g.constant(Matrix::zeros(1, 1))
    } else {
        let s = g.sum(parts);
        if directions.len() == 1 { s } else { g.scale(s, weight) }
    };
    per.sort_by_key(|(c, _)| *c);
    Ok(TotalLoss { loss, per_granularity: per })
}
