//! Patch-token ViT backbone, projection and prediction heads, and the
//! base/momentum encoder pair.
//!
//! Parameters live in flat [`ParamStore`]s. The base store holds backbone,
//! projector and predictor tensors in that order; the momentum store holds
//! the backbone and projector prefix with identical names and shapes, so a
//! tensor has the same index in both. Forward passes are recorded on an
//! [`autograd::Graph`](crate::autograd::Graph) through a [`Branch`], which
//! binds each tensor at most once per graph: every granularity that goes
//! through a head uses the same bound node.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchStats, Graph, ParamSlot, Var};
use crate::image::Image;
use crate::math::sqrt;
use crate::tensor::Matrix;
use crate::types::PatchGrid;
use crate::{Error, Result};

pub const BASE_STORE: u8 = 0;
pub const MOMENTUM_STORE: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_side: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub use_class_token: bool,
    pub layer_norm_eps: f64,
    /// Per-channel input normalization.
    pub pixel_mean: [f64; 3],
    pub pixel_std: [f64; 3],
}

impl ViTConfig {
    /// ViT-S/16.
    pub fn vit_small() -> Self {
        Self { embed_dim: 384, depth: 12, num_heads: 6, ..Self::desk() }
    }

    /// Small enough to train on a laptop CPU.
    pub fn desk() -> Self {
        Self {
            image_side: 224,
            patch_size: 16,
            embed_dim: 64,
            depth: 4,
            num_heads: 4,
            mlp_ratio: 4,
            use_class_token: false,
            layer_norm_eps: 1e-6,
            pixel_mean: [0.5; 3],
            pixel_std: [0.25; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_side == 0 || self.image_side % self.patch_size != 0 {
            return Err(Error::Config(format!("image_side {} is not a multiple of patch_size {}", self.image_side, self.patch_size)));
        }
        if self.num_heads == 0 || self.embed_dim == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!("embed_dim {} is not divisible by num_heads {}", self.embed_dim, self.num_heads)));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        if self.pixel_std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config(format!("pixel_std must be positive, got {:?}", self.pixel_std)));
        }
        Ok(())
    }

    pub fn grid(&self) -> PatchGrid {
        PatchGrid::square(self.image_side / self.patch_size)
    }

    pub fn tokens(&self) -> usize {
        self.grid().len() + self.use_class_token as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub projector: Vec<usize>,
    pub predictor: Vec<usize>,
    /// Learnable scale and shift on the last normalization of each head.
    pub final_affine: bool,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { projector: vec![2048, 2048, 128], predictor: vec![2048, 128], final_affine: false, bn_eps: 1e-5, bn_momentum: 0.1 }
    }
}

impl HeadConfig {
    pub fn desk() -> Self {
        Self { projector: vec![256, 256, 128], predictor: vec![256, 128], ..Self::default() }
    }

    pub fn out_dim(&self) -> usize {
        *self.projector.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.projector.is_empty() || self.predictor.is_empty() || self.projector.contains(&0) || self.predictor.contains(&0) {
            return Err(Error::Config("head widths must be non-empty and positive".into()));
        }
        if self.projector.last() != self.predictor.last() {
            return Err(Error::Config(format!(
                "projector output {} differs from predictor output {}",
                self.out_dim(),
                self.predictor.last().unwrap()
            )));
        }
        if !(self.bn_eps >= 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_eps must be >= 0 and bn_momentum in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Init {
    TruncNormal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
    /// Whether weight decay applies (matrices only; not norms, biases or
    /// position embeddings).
    pub decay: bool,
}

impl ParamSpec {
    fn new(name: String, rows: usize, cols: usize, init: Init, decay: bool) -> Self {
        Self { name, rows, cols, init, decay }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Named tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub values: Vec<Matrix>,
}

impl ParamStore {
    pub fn push(&mut self, name: String, value: Matrix) {
        self.names.push(name);
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.index_of(name).map(move |i| &mut self.values[i])
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flat_map(|m| m.data.iter().copied()).collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::Shape(format!("flat vector has {} entries, store has {}", flat.len(), self.numel())));
        }
        let mut offset = 0;
        for m in &mut self.values {
            let n = m.len();
            m.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Name of the tensor holding flat index `i`, and the offset inside it.
    pub fn locate(&self, mut i: usize) -> Option<(&str, usize)> {
        for (name, m) in self.names.iter().zip(&self.values) {
            if i < m.len() {
                return Some((name, i));
            }
            i -= m.len();
        }
        None
    }

    pub fn max_abs_diff(&self, other: &ParamStore) -> f64 {
        let mut worst = 0.0f64;
        for (a, b) in self.values.iter().zip(&other.values) {
            for (x, y) in a.data.iter().zip(&b.data) {
                worst = worst.max((x - y).abs());
            }
        }
        worst
    }
}

#[derive(Debug, Clone)]
struct BlockIdx {
    norm1: (usize, usize),
    qkv: (usize, usize),
    proj: (usize, usize),
    norm2: (usize, usize),
    fc1: (usize, usize),
    fc2: (usize, usize),
}

#[derive(Debug, Clone)]
struct BackboneIdx {
    patch_embed: (usize, usize),
    pos_embed: usize,
    cls_token: Option<usize>,
    blocks: Vec<BlockIdx>,
    norm: (usize, usize),
}

#[derive(Debug, Clone)]
struct HeadLayer {
    weight: usize,
    affine: Option<(usize, usize)>,
    /// Running mean and variance in the buffer store.
    running: (usize, usize),
    relu: bool,
}

/// Tensor layout derived from a backbone and head configuration.
#[derive(Debug, Clone)]
pub struct Architecture {
    pub vit: ViTConfig,
    pub heads: HeadConfig,
    params: Vec<ParamSpec>,
    buffers: Vec<ParamSpec>,
    backbone: BackboneIdx,
    projector: Vec<HeadLayer>,
    predictor: Vec<HeadLayer>,
    backbone_params: usize,
    shared_params: usize,
    shared_buffers: usize,
}

struct SpecBuilder {
    params: Vec<ParamSpec>,
    buffers: Vec<ParamSpec>,
}

impl SpecBuilder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init, decay: bool) -> usize {
        self.params.push(ParamSpec::new(name, rows, cols, init, decay));
        self.params.len() - 1
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> (usize, usize) {
        let w = self.add(format!("{prefix}.weight"), fan_in, fan_out, Init::TruncNormal, true);
        let b = self.add(format!("{prefix}.bias"), 1, fan_out, Init::Zeros, false);
        (w, b)
    }

    fn norm(&mut self, prefix: &str, dim: usize) -> (usize, usize) {
        let w = self.add(format!("{prefix}.weight"), 1, dim, Init::Ones, false);
        let b = self.add(format!("{prefix}.bias"), 1, dim, Init::Zeros, false);
        (w, b)
    }

    fn head(&mut self, prefix: &str, fan_in: usize, widths: &[usize], final_affine: bool) -> Vec<HeadLayer> {
        let mut layers = Vec::new();
        let mut d = fan_in;
        for (i, &w) in widths.iter().enumerate() {
            let last = i + 1 == widths.len();
            let weight = self.add(format!("{prefix}.{i}.weight"), d, w, Init::TruncNormal, true);
            let affine = (!last || final_affine).then(|| self.norm(&format!("{prefix}.{i}.bn"), w));
            self.buffers.push(ParamSpec::new(format!("{prefix}.{i}.bn.running_mean"), 1, w, Init::Zeros, false));
            self.buffers.push(ParamSpec::new(format!("{prefix}.{i}.bn.running_var"), 1, w, Init::Ones, false));
            let running = (self.buffers.len() - 2, self.buffers.len() - 1);
            layers.push(HeadLayer { weight, affine, running, relu: !last });
            d = w;
        }
        layers
    }
}

impl Architecture {
    pub fn new(vit: ViTConfig, heads: HeadConfig) -> Result<Self> {
        vit.validate()?;
        heads.validate()?;
        let d = vit.embed_dim;
        let p = vit.patch_size;
        let mut b = SpecBuilder { params: Vec::new(), buffers: Vec::new() };
        let patch_embed = b.linear("backbone.patch_embed", 3 * p * p, d);
        let cls_token = vit.use_class_token.then(|| b.add("backbone.cls_token".into(), 1, d, Init::TruncNormal, false));
        let pos_embed = b.add("backbone.pos_embed".into(), vit.tokens(), d, Init::TruncNormal, false);
        let blocks = (0..vit.depth)
            .map(|i| {
                let pre = format!("backbone.blocks.{i}");
                BlockIdx {
                    norm1: b.norm(&format!("{pre}.norm1"), d),
                    qkv: b.linear(&format!("{pre}.attn.qkv"), d, 3 * d),
                    proj: b.linear(&format!("{pre}.attn.proj"), d, d),
                    norm2: b.norm(&format!("{pre}.norm2"), d),
                    fc1: b.linear(&format!("{pre}.mlp.fc1"), d, vit.mlp_ratio * d),
                    fc2: b.linear(&format!("{pre}.mlp.fc2"), vit.mlp_ratio * d, d),
                }
            })
            .collect();
        let norm = b.norm("backbone.norm", d);
        let backbone_params = b.params.len();
        let projector = b.head("projector", d, &heads.projector, heads.final_affine);
        let shared_params = b.params.len();
        let shared_buffers = b.buffers.len();
        let predictor = b.head("predictor", heads.out_dim(), &heads.predictor, heads.final_affine);
        Ok(Self {
            vit,
            heads,
            params: b.params,
            buffers: b.buffers,
            backbone: BackboneIdx { patch_embed, pos_embed, cls_token, blocks, norm },
            projector,
            predictor,
            backbone_params,
            shared_params,
            shared_buffers,
        })
    }

    /// Every base-store tensor in order.
    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.params
    }

    /// The prefix of [`Architecture::param_specs`] mirrored by the momentum
    /// encoder (backbone and projector).
    pub fn momentum_specs(&self) -> &[ParamSpec] {
        &self.params[..self.shared_params]
    }

    pub fn buffer_specs(&self) -> &[ParamSpec] {
        &self.buffers
    }

    pub fn momentum_buffer_specs(&self) -> &[ParamSpec] {
        &self.buffers[..self.shared_buffers]
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(ParamSpec::len).sum()
    }

    pub fn backbone_parameter_count(&self) -> usize {
        self.params[..self.backbone_params].iter().map(ParamSpec::len).sum()
    }

    /// Store initialized per `ParamSpec`: truncated normal (sigma 0.02, cut at
    /// two sigma) for weights and embeddings, ones and zeros for norms and
    /// biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let normal = Normal::new(0.0, 0.02).expect("valid sigma");
        let mut store = ParamStore::default();
        for spec in &self.params {
            store.push(spec.name.clone(), init_tensor(spec, &normal, rng));
        }
        store
    }

    pub fn init_buffers(&self) -> ParamStore {
        let normal = Normal::new(0.0, 1.0).expect("valid sigma");
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for spec in &self.buffers {
            store.push(spec.name.clone(), init_tensor(spec, &normal, &mut rng));
        }
        store
    }

    fn check_store(&self, store: &ParamStore, specs: &[ParamSpec], what: &str) -> Result<()> {
        if store.len() != specs.len() {
            return Err(Error::Shape(format!("{what} store has {} tensors, expected {}", store.len(), specs.len())));
        }
        for ((name, m), spec) in store.names.iter().zip(&store.values).zip(specs) {
            if *name != spec.name || m.shape() != (spec.rows, spec.cols) {
                return Err(Error::Shape(format!(
                    "{what} tensor {name} {:?} does not match {} ({}, {})",
                    m.shape(),
                    spec.name,
                    spec.rows,
                    spec.cols
                )));
            }
        }
        Ok(())
    }
}

fn init_tensor<R: Rng + ?Sized>(spec: &ParamSpec, normal: &Normal<f64>, rng: &mut R) -> Matrix {
    match spec.init {
        Init::Zeros => Matrix::zeros(spec.rows, spec.cols),
        Init::Ones => Matrix::filled(spec.rows, spec.cols, 1.0),
        Init::TruncNormal => {
            let sigma = normal.std_dev();
            let data = (0..spec.len())
                .map(|_| loop {
                    let v = normal.sample(rng);
                    if v.abs() <= 2.0 * sigma {
                        break v;
                    }
                })
                .collect();
            Matrix::from_vec(spec.rows, spec.cols, data)
        }
    }
}

/// Splits a `side x side` image into row-major patch tokens of
/// `3 * patch^2` normalized samples (pixel-major, channel-minor).
pub fn patchify(image: &Image, vit: &ViTConfig) -> Result<Matrix> {
    if image.width != vit.image_side || image.height != vit.image_side {
        return Err(Error::Input(format!(
            "expected a {0}x{0} view, got {1}x{2}",
            vit.image_side, image.width, image.height
        )));
    }
    let p = vit.patch_size;
    let n = vit.image_side / p;
    let mut tokens = Matrix::zeros(n * n, 3 * p * p);
    for u in 0..n {
        for v in 0..n {
            let row = tokens.row_mut(u * n + v);
            for dy in 0..p {
                for dx in 0..p {
                    let px = image.pixel(v * p + dx, u * p + dy);
                    for ch in 0..3 {
                        row[(dy * p + dx) * 3 + ch] = (px[ch] - vit.pixel_mean[ch]) / vit.pixel_std[ch];
                    }
                }
            }
        }
    }
    Ok(tokens)
}

/// Batch normalization statistics source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running buffers are updated by the caller.
    Train,
    /// Running statistics.
    Eval,
}

/// Backbone output of one view.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// `U*V x D` patch features, row-major over the grid.
    pub features: Var,
    /// `tokens x 3D` query/key/value projections of the last block.
    pub last_qkv: Option<Var>,
}

/// Which view a feature map came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViewTag {
    First,
    Second,
}

/// Patch features of one view as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub grid: PatchGrid,
    /// `U*V x D`, row `u * V + v`.
    pub data: Matrix,
    pub view: ViewTag,
}

impl FeatureMap {
    pub fn dim(&self) -> usize {
        self.data.cols
    }

    pub fn get(&self, u: usize, v: usize) -> &[f64] {
        self.data.row(u * self.grid.cols + v)
    }
}

/// Statistics observed by each normalization layer of one head pass.
#[derive(Debug, Clone, Default)]
pub struct HeadStats {
    pub layers: Vec<(usize, BatchStats)>,
}

/// One encoder's parameters bound into a graph.
pub struct Branch<'a> {
    arch: &'a Architecture,
    params: &'a ParamStore,
    buffers: &'a ParamStore,
    store: u8,
    requires_grad: bool,
    bound: Vec<Option<Var>>,
}

impl<'a> Branch<'a> {
    pub fn new(arch: &'a Architecture, params: &'a ParamStore, buffers: &'a ParamStore, store: u8, requires_grad: bool) -> Self {
        Self { arch, params, buffers, store, requires_grad, bound: vec![None; params.len()] }
    }

    fn p(&mut self, g: &mut Graph, index: usize) -> Var {
        if let Some(v) = self.bound[index] {
            return v;
        }
        let v = g.param(ParamSlot { store: self.store, index }, self.params.values[index].clone(), self.requires_grad);
        self.bound[index] = Some(v);
        v
    }

    /// The node bound for tensor `index`, if this graph used it.
    pub fn bound(&self, index: usize) -> Option<Var> {
        self.bound[index]
    }

    fn linear(&mut self, g: &mut Graph, x: Var, (w, b): (usize, usize)) -> Var {
        let wv = self.p(g, w);
        let bv = self.p(g, b);
        let y = g.matmul(x, wv);
        g.add_row(y, bv)
    }

    fn ln(&mut self, g: &mut Graph, x: Var, (w, b): (usize, usize)) -> Var {
        let wv = self.p(g, w);
        let bv = self.p(g, b);
        g.layer_norm(x, wv, bv, self.arch.vit.layer_norm_eps)
    }

    /// Patch features for one view given its [`patchify`] tokens.
    pub fn encode(&mut self, g: &mut Graph, tokens: &Matrix) -> Result<Var> {
        Ok(self.encode_detailed(g, tokens, false)?.features)
    }

    pub fn encode_detailed(&mut self, g: &mut Graph, tokens: &Matrix, keep_last_qkv: bool) -> Result<Encoded> {
        let vit = &self.arch.vit;
        let grid = vit.grid();
        if tokens.shape() != (grid.len(), 3 * vit.patch_size * vit.patch_size) {
            return Err(Error::Input(format!(
                "token matrix is {:?}, expected ({}, {})",
                tokens.shape(),
                grid.len(),
                3 * vit.patch_size * vit.patch_size
            )));
        }
        let (d, heads) = (vit.embed_dim, vit.num_heads);
        let dh = d / heads;
        let idx = self.arch.backbone.clone();
        let t = g.constant(tokens.clone());
        let mut x = self.linear(g, t, idx.patch_embed);
        if let Some(cls) = idx.cls_token {
            let c = self.p(g, cls);
            x = g.concat_rows(vec![c, x]);
        }
        let pos = self.p(g, idx.pos_embed);
        x = g.add(x, pos);
        let mut last_qkv = None;
        for (bi, block) in idx.blocks.iter().enumerate() {
            let h = self.ln(g, x, block.norm1);
            let qkv = self.linear(g, h, block.qkv);
            if keep_last_qkv && bi + 1 == idx.blocks.len() {
                last_qkv = Some(qkv);
            }
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let q = g.slice_cols(qkv, hd * dh, dh);
                let k = g.slice_cols(qkv, d + hd * dh, dh);
                let v = g.slice_cols(qkv, 2 * d + hd * dh, dh);
                let scores = g.matmul_nt(q, k);
                let scores = g.scale(scores, 1.0 / sqrt(dh as f64));
                let att = g.softmax_rows(scores);
                outs.push(g.matmul(att, v));
            }
            let merged = if heads == 1 { outs[0] } else { g.concat_cols(outs) };
            let a = self.linear(g, merged, block.proj);
            x = g.add(x, a);
            let h = self.ln(g, x, block.norm2);
            let h = self.linear(g, h, block.fc1);
            let h = g.gelu(h);
            let h = self.linear(g, h, block.fc2);
            x = g.add(x, h);
        }
        x = self.ln(g, x, idx.norm);
        if idx.cls_token.is_some() {
            x = g.slice_rows(x, 1, grid.len());
        }
        Ok(Encoded { features: x, last_qkv })
    }

    fn head(&mut self, g: &mut Graph, x: Var, layers: &[HeadLayer], mode: Mode) -> Result<(Var, HeadStats)> {
        let rows = g.value(x).rows;
        if mode == Mode::Train && rows < 2 {
            return Err(Error::BatchTooSmall(rows));
        }
        let eps = self.arch.heads.bn_eps;
        let mut stats = HeadStats::default();
        let mut h = x;
        for layer in layers {
            let w = self.p(g, layer.weight);
            h = g.matmul(h, w);
            let affine = layer.affine.map(|(a, b)| (self.p(g, a), self.p(g, b)));
            h = match mode {
                Mode::Train => {
                    let (out, s) = g.batch_norm(h, affine, eps);
                    stats.layers.push((layer.running.0, s));
                    out
                }
                Mode::Eval => {
                    let mean = &self.buffers.values[layer.running.0].data;
                    let var = &self.buffers.values[layer.running.1].data;
                    g.frozen_norm(h, affine, mean, var, eps)
                }
            };
            if layer.relu {
                h = g.relu(h);
            }
        }
        Ok((h, stats))
    }

    /// Projection head over a batch of feature rows.
    pub fn project(&mut self, g: &mut Graph, x: Var, mode: Mode) -> Result<(Var, HeadStats)> {
        let layers = self.arch.projector.clone();
        self.head(g, x, &layers, mode)
    }

    /// Prediction head; only the base encoder has one.
    pub fn predict(&mut self, g: &mut Graph, x: Var, mode: Mode) -> Result<(Var, HeadStats)> {
        if self.params.len() < self.arch.params.len() {
            return Err(Error::Config("the momentum encoder has no predictor".into()));
        }
        let layers = self.arch.predictor.clone();
        self.head(g, x, &layers, mode)
    }

    /// Gradients for every tensor of the store, zero where nothing flowed.
    pub fn gradients(&self, g: &Graph) -> Vec<Matrix> {
        self.params
            .values
            .iter()
            .zip(&self.bound)
            .map(|(m, b)| match b.and_then(|v| g.grad(v)) {
                Some(grad) => grad.clone(),
                None => Matrix::zeros(m.rows, m.cols),
            })
            .collect()
    }
}

/// Folds batch statistics into running buffers:
/// `running <- (1 - momentum) * running + momentum * batch`, with the
/// unbiased batch variance.
pub fn update_running_stats(buffers: &mut ParamStore, stats: &HeadStats, rows: usize, momentum: f64) {
    let correction = if rows > 1 { rows as f64 / (rows - 1) as f64 } else { 1.0 };
    for (mean_idx, s) in &stats.layers {
        let mean = &mut buffers.values[*mean_idx].data;
        for (r, b) in mean.iter_mut().zip(&s.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        let var = &mut buffers.values[*mean_idx + 1].data;
        for (r, b) in var.iter_mut().zip(&s.var) {
            *r = (1.0 - momentum) * *r + momentum * b * correction;
        }
    }
}

/// `xi <- m * xi + (1 - m) * theta` for every momentum tensor, matched to
/// the base tensor of the same name. Evaluated as
/// `xi + (1 - m) * (theta - xi)` so equal tensors stay bit-identical.
pub fn ema_update(momentum: &mut ParamStore, base: &ParamStore, m: f64) -> Result<()> {
    for (i, name) in momentum.names.iter().enumerate() {
        let theta = if base.names.get(i) == Some(name) { &base.values[i] } else {
            base.get(name).ok_or_else(|| Error::Shape(format!("base encoder has no tensor {name}")))?
        };
        let xi = &mut momentum.values[i];
        if xi.shape() != theta.shape() {
            return Err(Error::Shape(format!("{name}: momentum {:?} vs base {:?}", xi.shape(), theta.shape())));
        }
        if m == 0.0 {
            xi.data.copy_from_slice(&theta.data);
            continue;
        }
        let step = 1.0 - m;
        for (x, t) in xi.data.iter_mut().zip(&theta.data) {
            *x += step * (t - *x);
        }
    }
    Ok(())
}

/// Base encoder, momentum encoder and their head buffers.
#[derive(Debug, Clone)]
pub struct ModelPair {
    pub arch: Architecture,
    /// Backbone, projector and predictor.
    pub base: ParamStore,
    /// Backbone and projector.
    pub momentum: ParamStore,
    pub base_buffers: ParamStore,
    pub momentum_buffers: ParamStore,
    pub momentum_coef: f64,
}

impl ModelPair {
    /// Fresh base parameters from `seed`, copied into the momentum encoder.
    pub fn new(vit: ViTConfig, heads: HeadConfig, momentum_coef: f64, seed: u64) -> Result<Self> {
        let arch = Architecture::new(vit, heads)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = arch.init_params(&mut rng);
        let base_buffers = arch.init_buffers();
        let mut pair = Self { arch, base, momentum: ParamStore::default(), base_buffers, momentum_buffers: ParamStore::default(), momentum_coef };
        pair.init_momentum_from_base();
        Ok(pair)
    }

    /// Reassembles a pair from stored tensors, checking every name and shape.
    pub fn from_parts(
        arch: Architecture,
        base: ParamStore,
        momentum: ParamStore,
        base_buffers: ParamStore,
        momentum_buffers: ParamStore,
        momentum_coef: f64,
    ) -> Result<Self> {
        arch.check_store(&base, arch.param_specs(), "base")?;
        arch.check_store(&momentum, arch.momentum_specs(), "momentum")?;
        arch.check_store(&base_buffers, arch.buffer_specs(), "base buffer")?;
        arch.check_store(&momentum_buffers, arch.momentum_buffer_specs(), "momentum buffer")?;
        Ok(Self { arch, base, momentum, base_buffers, momentum_buffers, momentum_coef })
    }

    /// Copies the backbone and projector of the base encoder into the
    /// momentum encoder.
    pub fn init_momentum_from_base(&mut self) {
        let n = self.arch.shared_params;
        self.momentum = ParamStore { names: self.base.names[..n].to_vec(), values: self.base.values[..n].to_vec() };
        let nb = self.arch.shared_buffers;
        self.momentum_buffers =
            ParamStore { names: self.base_buffers.names[..nb].to_vec(), values: self.base_buffers.values[..nb].to_vec() };
    }

    pub fn ema_update(&mut self, m: f64) -> Result<()> {
        ema_update(&mut self.momentum, &self.base, m)
    }

    pub fn base_branch(&self, requires_grad: bool) -> Branch<'_> {
        Branch::new(&self.arch, &self.base, &self.base_buffers, BASE_STORE, requires_grad)
    }

    pub fn momentum_branch(&self) -> Branch<'_> {
        Branch::new(&self.arch, &self.momentum, &self.momentum_buffers, MOMENTUM_STORE, false)
    }

    /// Base-encoder patch features of a view, without gradients.
    pub fn features(&self, image: &Image, view: ViewTag) -> Result<FeatureMap> {
        let tokens = patchify(image, &self.arch.vit)?;
        let mut g = Graph::new();
        let mut branch = self.base_branch(false);
        let f = branch.encode(&mut g, &tokens)?;
        Ok(FeatureMap { grid: self.arch.vit.grid(), data: g.value(f).clone(), view })
    }

    /// Largest `|xi - theta|` over the shared tensors.
    pub fn momentum_gap(&self) -> f64 {
        let n = self.arch.shared_params;
        let shared = ParamStore { names: self.base.names[..n].to_vec(), values: self.base.values[..n].to_vec() };
        self.momentum.max_abs_diff(&shared)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_vit() -> ViTConfig {
        ViTConfig { image_side: 32, patch_size: 8, embed_dim: 8, depth: 2, num_heads: 2, ..ViTConfig::desk() }
    }

    fn tiny_heads() -> HeadConfig {
        HeadConfig { projector: vec![12, 6], predictor: vec![10, 6], ..HeadConfig::default() }
    }

    fn noise_image(side: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_vec(side, side, (0..side * side * 3).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn configs_validate() {
        assert!(ViTConfig { patch_size: 15, ..ViTConfig::desk() }.validate().is_err());
        assert!(ViTConfig { num_heads: 5, ..ViTConfig::desk() }.validate().is_err());
        assert!(HeadConfig { predictor: vec![64, 32], ..HeadConfig::desk() }.validate().is_err());
        ViTConfig::vit_small().validate().unwrap();
    }

    #[test]
    fn vit_small_parameter_count() {
        let arch = Architecture::new(ViTConfig::vit_small(), HeadConfig::default()).unwrap();
        let n = arch.backbone_parameter_count() as f64;
        assert!((n / 22.0e6 - 1.0).abs() <= 0.05, "{n}");
    }

    #[test]
    fn output_shape_is_grid_by_dim() {
        let pair = ModelPair::new(ViTConfig::desk(), HeadConfig::desk(), 0.996, 0).unwrap();
        let f = pair.features(&noise_image(224, 1), ViewTag::First).unwrap();
        assert_eq!(f.grid, PatchGrid::square(14));
        assert_eq!(f.data.shape(), (196, 64));
        assert!(pair.features(&noise_image(64, 1), ViewTag::First).is_err());
    }

    #[test]
    fn class_token_is_dropped() {
        let vit = ViTConfig { use_class_token: true, ..tiny_vit() };
        let pair = ModelPair::new(vit, tiny_heads(), 0.996, 0).unwrap();
        let f = pair.features(&noise_image(32, 0), ViewTag::Second).unwrap();
        assert_eq!(f.data.shape(), (16, 8));
    }

    #[test]
    fn zero_linears_leave_normalized_positions() {
        let mut pair = ModelPair::new(tiny_vit(), tiny_heads(), 0.996, 3).unwrap();
        for (name, m) in pair.base.names.iter().zip(pair.base.values.iter_mut()) {
            let linear = name.contains("patch_embed") || name.contains("qkv") || name.contains("proj.") || name.contains("fc");
            if linear && name.starts_with("backbone") {
                m.data.fill(0.0);
            }
        }
        let f = pair.features(&noise_image(32, 5), ViewTag::First).unwrap();
        let pos = pair.base.get("backbone.pos_embed").unwrap().clone();
        let mut g = Graph::new();
        let p = g.constant(pos);
        let ones = g.constant(Matrix::filled(1, 8, 1.0));
        let zeros = g.constant(Matrix::zeros(1, 8));
        let expected = g.layer_norm(p, ones, zeros, pair.arch.vit.layer_norm_eps);
        assert_eq!(&f.data, g.value(expected));
    }

    #[test]
    fn permuting_patches_permutes_tokens_without_positions() {
        let mut pair = ModelPair::new(tiny_vit(), tiny_heads(), 0.996, 4).unwrap();
        pair.base.get_mut("backbone.pos_embed").unwrap().data.fill(0.0);
        let img = noise_image(32, 9);
        let mut swapped = img.clone();
        // swap patch (0, 0) with patch (2, 3)
        for dy in 0..8 {
            for dx in 0..8 {
                let a = img.pixel(dx, dy);
                let b = img.pixel(24 + dx, 16 + dy);
                swapped.set_pixel(dx, dy, b);
                swapped.set_pixel(24 + dx, 16 + dy, a);
            }
        }
        let f = pair.features(&img, ViewTag::First).unwrap();
        let h = pair.features(&swapped, ViewTag::First).unwrap();
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(f.get(0, 0), h.get(2, 3)));
        assert!(close(f.get(2, 3), h.get(0, 0)));
        assert!(close(f.get(1, 1), h.get(1, 1)));
    }

    #[test]
    fn eval_mode_deterministic() {
        let pair = ModelPair::new(tiny_vit(), tiny_heads(), 0.996, 7).unwrap();
        let img = noise_image(32, 2);
        assert_eq!(pair.features(&img, ViewTag::First).unwrap(), pair.features(&img, ViewTag::First).unwrap());
    }

    #[test]
    fn identity_heads_in_eval_mode() {
        let heads = HeadConfig { projector: vec![4, 4], predictor: vec![4, 4], bn_eps: 0.0, ..HeadConfig::default() };
        let vit = ViTConfig { embed_dim: 4, num_heads: 1, ..tiny_vit() };
        let mut pair = ModelPair::new(vit, heads, 0.996, 0).unwrap();
        for (name, m) in pair.base.names.iter().zip(pair.base.values.iter_mut()) {
            if (name.starts_with("projector") || name.starts_with("predictor")) && name.ends_with("weight") && !name.contains("bn") {
                *m = Matrix::identity(4);
            }
        }
        let x = Matrix::from_vec(3, 4, vec![0.5, 1.0, 0.0, 2.0, 0.1, 0.2, 0.3, 0.4, 3.0, 0.0, 1.0, 0.25]);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mut branch = pair.base_branch(false);
        let (z, _) = branch.project(&mut g, xv, Mode::Eval).unwrap();
        let (q, _) = branch.predict(&mut g, z, Mode::Eval).unwrap();
        assert_eq!(g.value(q), &x);
    }

    #[test]
    fn heads_share_parameters_across_calls() {
        let pair = ModelPair::new(tiny_vit(), tiny_heads(), 0.996, 0).unwrap();
        let mut g = Graph::new();
        let mut branch = pair.base_branch(true);
        let a = g.constant(Matrix::filled(3, 8, 0.3));
        let b = g.constant(Matrix::filled(5, 8, -0.1));
        branch.project(&mut g, a, Mode::Train).unwrap();
        let first = branch.bound(pair.arch.shared_params - 1).unwrap();
        let (z, _) = branch.project(&mut g, b, Mode::Train).unwrap();
        assert_eq!(branch.bound(pair.arch.shared_params - 1).unwrap(), first);
        assert_eq!(g.value(z).cols, 6);
        let one = g.constant(Matrix::filled(1, 8, 1.0));
        assert_eq!(branch.project(&mut g, one, Mode::Train).unwrap_err(), Error::BatchTooSmall(1));
    }

    #[test]
    fn momentum_mirrors_backbone_and_projector() {
        let pair = ModelPair::new(tiny_vit(), tiny_heads(), 0.996, 1).unwrap();
        assert_eq!(pair.momentum_gap(), 0.0);
        assert!(pair.momentum.names.iter().all(|n| !n.starts_with("predictor")));
        assert!(pair.base.names.iter().any(|n| n.starts_with("predictor")));
        let mut g = Graph::new();
        let x = g.constant(Matrix::filled(2, 6, 1.0));
        assert!(pair.momentum_branch().predict(&mut g, x, Mode::Eval).is_err());
    }

    #[test]
    fn ema_limits_and_closed_form() {
        let mut pair = ModelPair::new(tiny_vit(), tiny_heads(), 0.996, 1).unwrap();
        let before = pair.momentum.clone();
        for v in &mut pair.base.values {
            v.data.iter_mut().for_each(|x| *x += 0.5);
        }
        pair.ema_update(1.0).unwrap();
        assert_eq!(pair.momentum, before);
        pair.ema_update(0.0).unwrap();
        assert_eq!(pair.momentum_gap(), 0.0);

        let mut xi = ParamStore::default();
        xi.push("w".into(), Matrix::filled(1, 1, 1.0));
        let mut theta = ParamStore::default();
        theta.push("w".into(), Matrix::zeros(1, 1));
        ema_update(&mut xi, &theta, 0.996).unwrap();
        assert!((xi.values[0].data[0] - 0.996).abs() < 1e-15);
        for _ in 1..50 {
            ema_update(&mut xi, &theta, 0.996).unwrap();
        }
        assert!((xi.values[0].data[0] - 0.996f64.powi(50)).abs() < 1e-15);

        let mut bad = ParamStore::default();
        bad.push("w".into(), Matrix::zeros(2, 1));
        assert!(ema_update(&mut xi, &bad, 0.5).is_err());
    }

    #[test]
    fn store_flatten_round_trip_and_locate() {
        let pair = ModelPair::new(tiny_vit(), tiny_heads(), 0.996, 1).unwrap();
        let mut store = pair.base.clone();
        let flat = store.flatten();
        store.assign_flat(&flat).unwrap();
        assert_eq!(store, pair.base);
        assert_eq!(store.locate(0), Some(("backbone.patch_embed.weight", 0)));
        assert!(store.locate(flat.len()).is_none());
        assert!(store.assign_flat(&flat[1..]).is_err());
    }

    #[test]
    fn from_parts_checks_layout() {
        let pair = ModelPair::new(tiny_vit(), tiny_heads(), 0.996, 1).unwrap();
        let ok = ModelPair::from_parts(
            pair.arch.clone(),
            pair.base.clone(),
            pair.momentum.clone(),
            pair.base_buffers.clone(),
            pair.momentum_buffers.clone(),
            0.996,
        );
        assert!(ok.is_ok());
        let other = Architecture::new(ViTConfig { depth: 1, ..tiny_vit() }, tiny_heads()).unwrap();
        assert!(ModelPair::from_parts(other, pair.base, pair.momentum, pair.base_buffers, pair.momentum_buffers, 0.996).is_err());
    }

    #[test]
    fn decay_mask() {
        let arch = Architecture::new(tiny_vit(), tiny_heads()).unwrap();
        for spec in arch.param_specs() {
            let expect = spec.name.ends_with("weight") && !spec.name.contains("norm") && !spec.name.contains(".bn.");
            assert_eq!(spec.decay, expect, "{}", spec.name);
        }
    }

    #[test]
    fn truncated_normal_init_is_bounded() {
        let pair = ModelPair::new(ViTConfig::desk(), HeadConfig::desk(), 0.996, 11).unwrap();
        let w = pair.base.get("backbone.blocks.0.attn.qkv.weight").unwrap();
        assert!(w.max_abs() <= 0.04);
        let mean = w.data.iter().sum::<f64>() / w.len() as f64;
        let var = w.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 1e-3);
        assert!((sqrt(var) - 0.0176).abs() < 1e-3, "{}", sqrt(var));
    }
}
