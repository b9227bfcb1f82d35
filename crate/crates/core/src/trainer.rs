//! One iteration of multi-grained contrastive pretraining.
//!
//! Every random draw of an iteration comes from seeds derived from
//! `(config seed, step, batch position)`, and the data order of an epoch
//! from `(config seed, epoch)`. An iteration is therefore a pure function
//! of the model state, the optimizer state and the step number, which is
//! what makes resuming from a checkpoint bit-exact.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{sample_view_pair, AugmentParams};
use crate::autograd::{Graph, Var};
use crate::contrast::{build_targets, sample_sparse, total_loss, GranularityTargets, GranularityTerm, LossConfig, SparseSample, TotalLoss};
use crate::geometry::correspondence_weights;
use crate::image::Image;
use crate::math::{cos, powi, sqrt};
use crate::model::{patchify, update_running_stats, Branch, HeadConfig, HeadStats, Mode, ModelPair, ParamStore, ViTConfig};
use crate::contrast::selection_matrix;
use crate::oracle::Evaluation;
use crate::tensor::Matrix;
use crate::types::{CorrespondenceTable, CropBox};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: u64,
    pub warmup_epochs: u64,
    pub batch_size: usize,
    /// Overrides `epochs * steps_per_epoch` as the schedule length.
    pub steps: Option<u64>,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global-norm gradient clip.
    pub grad_clip: Option<f64>,
    pub momentum: f64,
    pub loss: LossConfig,
    pub vit: ViTConfig,
    pub heads: HeadConfig,
    pub augment: AugmentParams,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    /// ViT-S/16 with the published optimization settings.
    fn default() -> Self {
        Self {
            epochs: 800,
            warmup_epochs: 10,
            batch_size: 256,
            steps: None,
            lr_max: 1e-3,
            lr_min: 1e-6,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: None,
            momentum: 0.996,
            loss: LossConfig::default(),
            vit: ViTConfig::vit_small(),
            heads: HeadConfig::default(),
            augment: AugmentParams::default(),
            seed: 0,
            checkpoint_every: 1000,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    /// Desk-scale model and batch. A 100-step run on 64 synthetic images
    /// does not learn under the full photometric pipeline and the slow
    /// 0.996 momentum, so the desk preset uses crops and flips only, a
    /// minimum crop area of 0.3, momentum 0.9 and a peak rate of 5e-4.
    pub fn desk() -> Self {
        Self {
            epochs: 13,
            warmup_epochs: 1,
            batch_size: 8,
            lr_max: 5e-4,
            momentum: 0.9,
            augment: AugmentParams { crop_area_range: (0.3, 1.0), ..AugmentParams::geometry_only() },
            vit: ViTConfig::desk(),
            heads: HeadConfig::desk(),
            checkpoint_every: 50,
            log_every: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.heads.validate()?;
        self.augment.validate()?;
        self.loss.validate(self.vit.grid())?;
        if self.augment.output_side != self.vit.image_side {
            return Err(Error::Config(format!(
                "augmentation output side {} differs from image_side {}",
                self.augment.output_side, self.vit.image_side
            )));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!("warmup_epochs {} must be below epochs {}", self.warmup_epochs, self.epochs)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr_max > 0.0 && self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::Config(format!("need 0 < lr_min <= lr_max, got {} and {}", self.lr_min, self.lr_max)));
        }
        if !(self.weight_decay >= 0.0) || !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config("weight_decay must be >= 0 and momentum in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("betas must lie in [0, 1) and adam_eps be positive".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if self.log_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("log_every and checkpoint_every must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr_max`, then cosine decay to `lr_min`;
/// steps past the end stay at `lr_min`.
pub fn lr_at(step: u64, total_steps: u64, warmup_steps: u64, lr_max: f64, lr_min: f64) -> f64 {
    if step >= total_steps {
        return lr_min;
    }
    if step < warmup_steps {
        return lr_max * step as f64 / warmup_steps as f64;
    }
    let p = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    let h = 0.5 * (1.0 + cos(core::f64::consts::PI * p));
    lr_max * h + lr_min * (1.0 - h)
}

/// Step counts derived from a config and a dataset size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub dataset_len: usize,
    pub steps_per_epoch: u64,
    pub total_steps: u64,
    pub warmup_steps: u64,
}

impl Schedule {
    pub fn new(cfg: &TrainConfig, dataset_len: usize) -> Result<Self> {
        if dataset_len == 0 {
            return Err(Error::Input("dataset is empty".into()));
        }
        let steps_per_epoch = dataset_len.div_ceil(cfg.batch_size) as u64;
        let total_steps = cfg.steps.unwrap_or(cfg.epochs * steps_per_epoch);
        let warmup_steps = (cfg.warmup_epochs * steps_per_epoch).min(total_steps);
        Ok(Self { dataset_len, steps_per_epoch, total_steps, warmup_steps })
    }

    /// Learning rate of the update performed at 0-based `step`; updates use
    /// the schedule value at `step + 1` so the first one is not zero and the
    /// last one lands on `lr_min`.
    pub fn lr(&self, step: u64, cfg: &TrainConfig) -> f64 {
        lr_at(step + 1, self.total_steps, self.warmup_steps, cfg.lr_max, cfg.lr_min)
    }

    /// Dataset indices of the batch at `step`: epoch `step / steps_per_epoch`
    /// in a seeded shuffled order, last batch of an epoch possibly short.
    pub fn batch_indices(&self, step: u64, batch_size: usize, seed: u64) -> Vec<usize> {
        let epoch = step / self.steps_per_epoch;
        let pos = (step % self.steps_per_epoch) as usize;
        let order = epoch_order(self.dataset_len, seed, epoch);
        let start = pos * batch_size;
        order[start..(start + batch_size).min(self.dataset_len)].to_vec()
    }
}

/// SplitMix64 over the seed and `parts`.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(seed), |h, &p| mix(h ^ mix(p)))
}

const TAG_EPOCH: u64 = 1;
const TAG_VIEWS: u64 = 2;
const TAG_SAMPLE: u64 = 3;

pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_EPOCH, epoch]));
    order.shuffle(&mut rng);
    order
}

/// Decoupled-weight-decay Adam state, one moment pair per tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    /// Updates taken so far.
    pub t: u64,
}

impl AdamW {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = params.values.iter().map(|m| Matrix::zeros(m.rows, m.cols)).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    /// `theta <- theta - lr * (wd * theta [if decay] + m_hat / (sqrt(v_hat) + eps))`.
    #[allow(clippy::too_many_arguments)]
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Matrix], decay: &[bool], lr: f64, wd: f64, beta1: f64, beta2: f64, eps: f64) -> Result<()> {
        if grads.len() != params.len() || decay.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Shape(format!("{} gradients and {} decay flags for {} tensors", grads.len(), decay.len(), params.len())));
        }
        self.t += 1;
        let bc1 = 1.0 - powi(beta1, self.t as i32);
        let bc2 = 1.0 - powi(beta2, self.t as i32);
        for (i, theta) in params.values.iter_mut().enumerate() {
            let g = &grads[i];
            if g.shape() != theta.shape() {
                return Err(Error::Shape(format!("gradient {:?} for tensor {:?}", g.shape(), theta.shape())));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, gv), mv), vv) in theta.data.iter_mut().zip(&g.data).zip(&mut m.data).zip(&mut v.data) {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let update = (*mv / bc1) / (sqrt(*vv / bc2) + eps);
                if decay[i] {
                    *p -= lr * wd * *p;
                }
                *p -= lr * update;
            }
        }
        Ok(())
    }
}

/// Scales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: Option<f64>) -> f64 {
    let norm = sqrt(grads.iter().flat_map(|g| g.data.iter()).map(|v| v * v).sum());
    if let Some(max) = max_norm {
        if norm > max {
            let s = max / norm;
            for g in grads.iter_mut() {
                g.scale(s);
            }
        }
    }
    norm
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: ModelPair,
    pub optimizer: AdamW,
    /// Updates completed.
    pub step: u64,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = ModelPair::new(cfg.vit.clone(), cfg.heads.clone(), cfg.momentum, derive_seed(cfg.seed, &[0]))?;
        let optimizer = AdamW::new(&model.base);
        Ok(Self { model, optimizer, step: 0 })
    }
}

/// Query-to-key assignment of one loss direction for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionPlan {
    /// View whose cells are queries (0 or 1); the other view gives keys.
    pub query_view: usize,
    pub tables: Vec<CorrespondenceTable>,
    pub sample: SparseSample,
}

/// One augmented image ready for both encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedImage {
    pub id: usize,
    pub crops: [CropBox; 2],
    pub tokens: [Matrix; 2],
    pub directions: Vec<DirectionPlan>,
}

/// A batch of prepared images and the per-direction, per-granularity
/// target layout.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub images: Vec<PreparedImage>,
    /// `targets[direction][granularity index]`.
    pub targets: Vec<Vec<GranularityTargets>>,
}

impl BatchPlan {
    pub fn ids(&self) -> Vec<usize> {
        self.images.iter().map(|p| p.id).collect()
    }
}

/// Augments image `id` (batch slot `slot` of `step`), builds its tables
/// and draws its sparse sample.
pub fn prepare_image(image: &Image, id: usize, slot: usize, step: u64, cfg: &TrainConfig) -> Result<PreparedImage> {
    let seed = derive_seed(cfg.seed, &[TAG_VIEWS, step, slot as u64]);
    let pair = sample_view_pair(image, &cfg.augment, seed)?;
    let grid = cfg.vit.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_SAMPLE, step, slot as u64]));
    let views = [pair.crop1, pair.crop2];
    let n_dirs = if cfg.loss.symmetrize { 2 } else { 1 };
    let mut directions = Vec::with_capacity(n_dirs);
    for query_view in 0..n_dirs {
        let (a, b) = (&views[query_view], &views[1 - query_view]);
        let tables = cfg
            .loss
            .granularities()
            .into_iter()
            .map(|c| correspondence_weights(a, b, grid, c))
            .collect::<Result<Vec<_>>>()?;
        let sample = sample_sparse(&tables, &cfg.loss.counts, &mut rng)?;
        directions.push(DirectionPlan { query_view, tables, sample });
    }
    let tokens = [patchify(&pair.image1, &cfg.vit)?, patchify(&pair.image2, &cfg.vit)?];
    Ok(PreparedImage { id, crops: views, tokens, directions })
}

/// Assembles the target layout of already prepared images.
pub fn plan_batch(images: Vec<PreparedImage>, cfg: &LossConfig) -> Result<BatchPlan> {
    if images.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let n_dirs = images[0].directions.len();
    let mut targets = Vec::with_capacity(n_dirs);
    for d in 0..n_dirs {
        let mut per_c = Vec::new();
        for (ci, c) in cfg.granularities().into_iter().enumerate() {
            let tables: Vec<&CorrespondenceTable> = images.iter().map(|p| &p.directions[d].tables[ci]).collect();
            let samples: Vec<&SparseSample> = images.iter().map(|p| &p.directions[d].sample).collect();
            per_c.push(build_targets(c, &tables, &samples)?);
        }
        targets.push(per_c);
    }
    Ok(BatchPlan { images, targets })
}

pub fn prepare_batch(batch: &[(usize, &Image)], step: u64, cfg: &TrainConfig) -> Result<BatchPlan> {
    let images = batch
        .iter()
        .enumerate()
        .map(|(slot, (id, img))| prepare_image(img, *id, slot, step, cfg))
        .collect::<Result<Vec<_>>>()?;
    plan_batch(images, &cfg.loss)
}

/// Encodes each image's `view` once per graph.
fn encode_views(g: &mut Graph, branch: &mut Branch<'_>, plan: &BatchPlan, views: &[usize]) -> Result<Vec<[Option<Var>; 2]>> {
    let mut out = Vec::with_capacity(plan.images.len());
    for img in &plan.images {
        let mut e = [None, None];
        for &v in views {
            e[v] = Some(branch.encode(g, &img.tokens[v])?);
        }
        out.push(e);
    }
    Ok(out)
}

/// Stacks pooled cells (c-major, then image) for one direction, runs the
/// head(s) once and splits the result back per granularity.
fn head_rows(
    g: &mut Graph,
    branch: &mut Branch<'_>,
    plan: &BatchPlan,
    encoded: &[[Option<Var>; 2]],
    direction: usize,
    keys: bool,
    predictor: bool,
) -> Result<(Vec<Option<Var>>, HeadStats, usize)> {
    let grid = branch_grid(plan);
    let mut blocks = Vec::new();
    let mut counts = Vec::new();
    for t in &plan.targets[direction] {
        let rows = if keys { &t.key_rows } else { &t.query_rows };
        counts.push(rows.len());
        for (i, img) in plan.images.iter().enumerate() {
            let cells: Vec<(usize, usize)> = rows.iter().filter(|r| r.0 == i).map(|r| (r.1, r.2)).collect();
            if cells.is_empty() {
                continue;
            }
            let qv = img.directions[direction].query_view;
            let view = if keys { 1 - qv } else { qv };
            let f = encoded[i][view].ok_or_else(|| Error::Input("view was not encoded".into()))?;
            blocks.push(g.left_mul(selection_matrix(grid, t.c, &cells)?, f));
        }
    }
    let total: usize = counts.iter().sum();
    if blocks.is_empty() {
        return Ok((vec![None; counts.len()], HeadStats::default(), 0));
    }
    let stacked = if blocks.len() == 1 { blocks[0] } else { g.concat_rows(blocks) };
    let (mut out, mut stats) = branch.project(g, stacked, Mode::Train)?;
    if predictor {
        let (q, pstats) = branch.predict(g, out, Mode::Train)?;
        out = q;
        stats.layers.extend(pstats.layers);
    }
    let mut offset = 0;
    let mut per_c = Vec::with_capacity(counts.len());
    for n in counts {
        per_c.push((n > 0).then(|| g.slice_rows(out, offset, n)));
        offset += n;
    }
    Ok((per_c, stats, total))
}

fn branch_grid(plan: &BatchPlan) -> crate::types::PatchGrid {
    let tokens = plan.images[0].tokens[0].rows;
    let side = sqrt(tokens as f64) as usize;
    crate::types::PatchGrid::square(side)
}

/// Momentum-branch key projections: `z[direction][granularity index]`.
pub struct KeyOutput {
    pub z: Vec<Vec<Option<Var>>>,
    pub stats: Vec<(HeadStats, usize)>,
}

fn views_needed(plan: &BatchPlan, keys: bool) -> Vec<usize> {
    let mut views: Vec<usize> = plan.images[0]
        .directions
        .iter()
        .map(|d| if keys { 1 - d.query_view } else { d.query_view })
        .collect();
    views.sort_unstable();
    views.dedup();
    views
}

pub fn key_projections(g: &mut Graph, branch: &mut Branch<'_>, plan: &BatchPlan) -> Result<KeyOutput> {
    let encoded = encode_views(g, branch, plan, &views_needed(plan, true))?;
    let mut z = Vec::new();
    let mut stats = Vec::new();
    for d in 0..plan.targets.len() {
        let (per_c, s, rows) = head_rows(g, branch, plan, &encoded, d, true, false)?;
        z.push(per_c);
        stats.push((s, rows));
    }
    Ok(KeyOutput { z, stats })
}

/// Base-branch loss given key nodes in the same graph.
pub struct QueryOutput {
    pub total: TotalLoss,
    pub stats: Vec<(HeadStats, usize)>,
}

pub fn query_loss(g: &mut Graph, branch: &mut Branch<'_>, plan: &BatchPlan, z: &[Vec<Option<Var>>], loss: &LossConfig) -> Result<QueryOutput> {
    let encoded = encode_views(g, branch, plan, &views_needed(plan, false))?;
    let mut directions = Vec::new();
    let mut stats = Vec::new();
    for (d, per_c_targets) in plan.targets.iter().enumerate() {
        let (q, s, rows) = head_rows(g, branch, plan, &encoded, d, false, true)?;
        stats.push((s, rows));
        let mut terms = Vec::new();
        for (ci, t) in per_c_targets.iter().enumerate() {
            if let (Some(qv), Some(zv)) = (q[ci], z[d][ci]) {
                terms.push(GranularityTerm { c: t.c, q: qv, z: zv, targets: t.targets.clone() });
            }
        }
        directions.push(terms);
    }
    let total = total_loss(g, &directions, loss.temperature, plan.images.len())?;
    Ok(QueryOutput { total, stats })
}

/// Key projections as plain values, computed in a throwaway graph.
#[derive(Debug, Clone)]
pub struct KeyValues {
    pub z: Vec<Vec<Option<Matrix>>>,
    pub stats: Vec<(HeadStats, usize)>,
}

pub fn momentum_keys(model: &ModelPair, plan: &BatchPlan) -> Result<KeyValues> {
    let mut g = Graph::new();
    let mut branch = model.momentum_branch();
    let out = key_projections(&mut g, &mut branch, plan)?;
    let z = out.z.iter().map(|d| d.iter().map(|v| v.map(|v| g.value(v).clone())).collect()).collect();
    Ok(KeyValues { z, stats: out.stats })
}

fn key_constants(g: &mut Graph, keys: &KeyValues) -> Vec<Vec<Option<Var>>> {
    keys.z.iter().map(|d| d.iter().map(|m| m.as_ref().map(|m| g.constant(m.clone()))).collect()).collect()
}

/// Loss and metrics of one update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub per_granularity: Vec<(usize, f64)>,
    pub grad_norm: f64,
    pub batch: Vec<usize>,
}

/// Augment, encode, build targets, sample, project, take the loss,
/// back-propagate, apply AdamW at the scheduled rate, then update the
/// momentum encoder.
pub fn train_step(state: &mut TrainState, batch: &[(usize, &Image)], cfg: &TrainConfig, schedule: &Schedule) -> Result<StepMetrics> {
    let lr = schedule.lr(state.step, cfg);
    train_step_with_lr(state, batch, cfg, lr)
}

/// [`train_step`] at an explicit learning rate.
pub fn train_step_with_lr(state: &mut TrainState, batch: &[(usize, &Image)], cfg: &TrainConfig, lr: f64) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let step = state.step;
    let plan = prepare_batch(batch, step, cfg)?;
    let non_finite = |detail: alloc::string::String| Error::NonFinite { step, seed: cfg.seed, batch: plan.ids(), detail };

    let keys = momentum_keys(&state.model, &plan)?;
    let mut g = Graph::new();
    let z = key_constants(&mut g, &keys);
    let mut branch = state.model.base_branch(true);
    let out = query_loss(&mut g, &mut branch, &plan, &z, &cfg.loss)?;
    let loss = g.scalar(out.total.loss);
    if !loss.is_finite() {
        return Err(non_finite(format!("loss {loss}")));
    }
    g.backward(out.total.loss);
    let mut grads = branch.gradients(&g);
    drop(branch);
    let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip);
    if !grad_norm.is_finite() {
        return Err(non_finite(format!("gradient norm {grad_norm}")));
    }
    let decay: Vec<bool> = state.model.arch.param_specs().iter().map(|s| s.decay).collect();
    state.optimizer.step(&mut state.model.base, &grads, &decay, lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.adam_eps)?;
    let momentum = cfg.heads.bn_momentum;
    for (stats, rows) in &out.stats {
        update_running_stats(&mut state.model.base_buffers, stats, *rows, momentum);
    }
    for (stats, rows) in &keys.stats {
        update_running_stats(&mut state.model.momentum_buffers, stats, *rows, momentum);
    }
    state.model.ema_update(cfg.momentum)?;
    state.step += 1;
    Ok(StepMetrics { step, lr, loss, per_granularity: out.total.per_granularity, grad_norm, batch: plan.ids() })
}

/// The total loss as a function of the flattened base parameters, with
/// views, samples and momentum keys frozen. Used for gradient checks.
pub struct LossProbe {
    pub model: ModelPair,
    pub plan: BatchPlan,
    pub keys: KeyValues,
    pub loss: LossConfig,
}

impl LossProbe {
    pub fn new(model: ModelPair, batch: &[(usize, &Image)], cfg: &TrainConfig, step: u64) -> Result<Self> {
        let plan = prepare_batch(batch, step, cfg)?;
        let keys = momentum_keys(&model, &plan)?;
        Ok(Self { model, plan, keys, loss: cfg.loss.clone() })
    }

    pub fn params(&self) -> Vec<f64> {
        self.model.base.flatten()
    }

    fn run(&self, base: &ParamStore, with_grad: bool) -> Result<(f64, u64, Vec<f64>, Vec<(usize, f64)>)> {
        let mut g = Graph::new();
        let z = key_constants(&mut g, &self.keys);
        let mut branch = Branch::new(&self.model.arch, base, &self.model.base_buffers, crate::model::BASE_STORE, with_grad);
        let out = query_loss(&mut g, &mut branch, &self.plan, &z, &self.loss)?;
        let value = g.scalar(out.total.loss);
        let signature = g.relu_signature();
        let mut grad = Vec::new();
        if with_grad {
            g.backward(out.total.loss);
            grad = branch.gradients(&g).iter().flat_map(|m| m.data.iter().copied()).collect();
        }
        Ok((value, signature, grad, out.total.per_granularity))
    }

    /// Loss and ReLU pattern at `flat`.
    pub fn evaluate(&self, flat: &[f64]) -> Result<Evaluation> {
        let mut base = self.model.base.clone();
        base.assign_flat(flat)?;
        let (value, signature, _, _) = self.run(&base, false)?;
        Ok(Evaluation { value, signature })
    }

    /// Loss and analytic gradient at the model's current parameters.
    pub fn gradient(&self) -> Result<(f64, Vec<f64>)> {
        let (value, _, grad, _) = self.run(&self.model.base, true)?;
        Ok((value, grad))
    }

    /// Per-granularity losses at the model's current parameters.
    pub fn per_granularity(&self) -> Result<Vec<(usize, f64)>> {
        Ok(self.run(&self.model.base, false)?.3)
    }
}

/// Loss with the momentum encoder bound as trainable parameters in the
/// same graph as the base encoder; returns the loss and the largest
/// gradient magnitude that reached any momentum tensor.
pub fn momentum_gradient_leak(model: &ModelPair, plan: &BatchPlan, loss: &LossConfig) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let mut mom = Branch::new(&model.arch, &model.momentum, &model.momentum_buffers, crate::model::MOMENTUM_STORE, true);
    let keys = key_projections(&mut g, &mut mom, plan)?;
    let mut base = model.base_branch(true);
    let out = query_loss(&mut g, &mut base, plan, &keys.z, loss)?;
    g.backward(out.total.loss);
    let leak = mom.gradients(&g).iter().map(Matrix::max_abs).fold(0.0, f64::max);
    Ok((g.scalar(out.total.loss), leak))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{synthetic_image, SyntheticParams};

    fn tiny_cfg() -> TrainConfig {
        let vit = ViTConfig { image_side: 64, patch_size: 16, embed_dim: 16, depth: 1, num_heads: 2, ..ViTConfig::desk() };
        TrainConfig {
            vit,
            heads: HeadConfig { projector: vec![32, 16], predictor: vec![32, 16], ..HeadConfig::default() },
            augment: AugmentParams { output_side: 64, ..AugmentParams::default() },
            loss: LossConfig { counts: vec![(1, 4), (2, 2), (4, 1)], ..LossConfig::default() },
            batch_size: 2,
            epochs: 3,
            warmup_epochs: 1,
            ..TrainConfig::desk()
        }
    }

    fn images(n: usize) -> Vec<Image> {
        let p = SyntheticParams { side: 96, ..SyntheticParams::default() };
        (0..n).map(|i| synthetic_image(&p, 5, i)).collect()
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_at(100, 1000, 100, 1e-3, 1e-6), 1e-3);
        assert_eq!(lr_at(1000, 1000, 100, 1e-3, 1e-6), 1e-6);
        assert_eq!(lr_at(50, 1000, 100, 1e-3, 1e-6), 5e-4);
        assert_eq!(lr_at(0, 1000, 100, 1e-3, 1e-6), 0.0);
        assert_eq!(lr_at(5000, 1000, 100, 1e-3, 1e-6), 1e-6);
        let mid = lr_at(550, 1000, 100, 1e-3, 1e-6);
        assert!((mid - (1e-3 + 1e-6) / 2.0).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for s in 100..=1000 {
            let lr = lr_at(s, 1000, 100, 1e-3, 1e-6);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        TrainConfig::desk().validate().unwrap();
        assert!(TrainConfig { warmup_epochs: 20, epochs: 10, ..TrainConfig::desk() }.validate().is_err());
        assert!(TrainConfig { lr_max: 0.0, ..TrainConfig::desk() }.validate().is_err());
        let mut bad = TrainConfig::desk();
        bad.augment.output_side = 96;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let cfg = TrainConfig { batch_size: 3, ..TrainConfig::desk() };
        let s = Schedule::new(&cfg, 10).unwrap();
        assert_eq!(s.steps_per_epoch, 4);
        let mut seen: Vec<usize> = (0..4).flat_map(|st| s.batch_indices(st, 3, 9)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(s.batch_indices(3, 3, 9).len(), 1);
        assert_ne!(epoch_order(10, 9, 0), epoch_order(10, 9, 1));
        assert!(Schedule::new(&cfg, 0).is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, &[2, 3]), derive_seed(1, &[3, 2]));
        assert_ne!(derive_seed(1, &[2]), derive_seed(2, &[2]));
        assert_eq!(derive_seed(7, &[1, 2]), derive_seed(7, &[1, 2]));
    }

    #[test]
    fn adamw_first_step_and_decoupled_decay() {
        let mut p = ParamStore::default();
        p.push("w".into(), Matrix::from_vec(1, 2, vec![1.0, -2.0]));
        p.push("b".into(), Matrix::from_vec(1, 1, vec![0.5]));
        let mut opt = AdamW::new(&p);
        let grads = vec![Matrix::from_vec(1, 2, vec![0.1, -0.3]), Matrix::from_vec(1, 1, vec![2.0])];
        opt.step(&mut p, &grads, &[true, false], 0.01, 0.1, 0.9, 0.999, 1e-8).unwrap();
        // first step: m_hat = g, v_hat = g^2, update = sign(g) up to eps
        let w = &p.values[0].data;
        assert!((w[0] - (1.0 - 0.01 * 0.1 * 1.0 - 0.01 * 0.1 / (0.1 + 1e-8))).abs() < 1e-15);
        assert!((w[1] - (-2.0 + 0.01 * 0.1 * 2.0 + 0.01 * 0.3 / (0.3 + 1e-8))).abs() < 1e-15);
        assert!((p.values[1].data[0] - (0.5 - 0.01 * 2.0 / (2.0 + 1e-8))).abs() < 1e-15);

        // zero gradients: excluded tensors are untouched whatever the decay
        let mut a = p.clone();
        let mut b = p.clone();
        let zero = vec![Matrix::zeros(1, 2), Matrix::zeros(1, 1)];
        AdamW::new(&a).step(&mut a, &zero, &[true, false], 0.01, 0.0, 0.9, 0.999, 1e-8).unwrap();
        AdamW::new(&b).step(&mut b, &zero, &[true, false], 0.01, 0.5, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(a.values[1], b.values[1]);
        assert_ne!(a.values[0], b.values[0]);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Matrix::from_vec(1, 2, vec![3.0, 4.0])];
        assert_eq!(clip_global_norm(&mut g, Some(1.0)), 5.0);
        assert!((g[0].data[0] - 0.6).abs() < 1e-15);
        assert_eq!(clip_global_norm(&mut g, None), 1.0);
    }

    #[test]
    fn step_is_deterministic_and_updates_momentum_after_optimizer() {
        let cfg = tiny_cfg();
        let imgs = images(2);
        let batch: Vec<(usize, &Image)> = imgs.iter().enumerate().collect();
        let schedule = Schedule::new(&cfg, 2).unwrap();
        let mut a = TrainState::new(&cfg).unwrap();
        let mut b = TrainState::new(&cfg).unwrap();
        for _ in 0..3 {
            let ma = train_step(&mut a, &batch, &cfg, &schedule).unwrap();
            let mb = train_step(&mut b, &batch, &cfg, &schedule).unwrap();
            assert_eq!(ma, mb);
            assert!(ma.loss.is_finite() && ma.loss > 0.0);
        }
        assert_eq!(a.model.base, b.model.base);
        assert!(a.model.momentum_gap() > 0.0);
    }

    #[test]
    fn zero_learning_rate_freezes_base() {
        let cfg = tiny_cfg();
        let imgs = images(2);
        let batch: Vec<(usize, &Image)> = imgs.iter().enumerate().collect();
        let mut s = TrainState::new(&cfg).unwrap();
        let before = s.model.base.clone();
        let first = train_step_with_lr(&mut s, &batch, &cfg, 0.0).unwrap();
        assert_eq!(s.model.base, before);
        assert_eq!(s.model.momentum_gap(), 0.0);
        s.step = 0;
        let again = train_step_with_lr(&mut s, &batch, &cfg, 0.0).unwrap();
        assert_eq!(first.loss, again.loss);
    }

    #[test]
    fn momentum_receives_no_gradient() {
        let cfg = tiny_cfg();
        let imgs = images(2);
        let batch: Vec<(usize, &Image)> = imgs.iter().enumerate().collect();
        let state = TrainState::new(&cfg).unwrap();
        let plan = prepare_batch(&batch, 0, &cfg).unwrap();
        let (loss, leak) = momentum_gradient_leak(&state.model, &plan, &cfg.loss).unwrap();
        assert!(loss > 0.0);
        assert_eq!(leak, 0.0);
    }

    #[test]
    fn symmetric_loss_runs_both_directions() {
        let mut cfg = tiny_cfg();
        cfg.loss.symmetrize = true;
        let imgs = images(2);
        let batch: Vec<(usize, &Image)> = imgs.iter().enumerate().collect();
        let plan = prepare_batch(&batch, 0, &cfg).unwrap();
        assert_eq!(plan.targets.len(), 2);
        let mut state = TrainState::new(&cfg).unwrap();
        let schedule = Schedule::new(&cfg, 2).unwrap();
        assert!(train_step(&mut state, &batch, &cfg, &schedule).unwrap().loss.is_finite());
    }

    #[test]
    fn probe_gradient_matches_finite_differences() {
        let cfg = tiny_cfg();
        let imgs = images(2);
        let batch: Vec<(usize, &Image)> = imgs.iter().enumerate().collect();
        let state = TrainState::new(&cfg).unwrap();
        let probe = LossProbe::new(state.model, &batch, &cfg, 0).unwrap();
        let (value, grad) = probe.gradient().unwrap();
        let params = probe.params();
        assert_eq!(probe.evaluate(&params).unwrap().value, value);
        let opts = crate::oracle::GradCheckOptions { samples: 40, ..Default::default() };
        let report = crate::oracle::fd_gradient_check(|p: &[f64]| probe.evaluate(p).unwrap(), &params, &grad, &opts).unwrap();
        assert!(report.passed(1e-5), "{:?}", report.worst_index.map(|i| (probe.model.base.locate(i), report.max_rel_error)));
    }
}
