//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "MGCCKPT\0"
//! version   u32      1
//! meta_len  u64
//! meta      meta_len bytes of UTF-8 JSON (see `Metadata`)
//! count     u32      number of tensor records
//! record*   name_len u32, name bytes, dtype u8 (0 = f64, 1 = f32),
//!           ndim u8, dims u64 * ndim, product(dims) samples
//! ```
//!
//! Tensor names carry a store prefix: `base/`, `momentum/`, `base_buffer/`,
//! `momentum_buffer/`, `adam_m/`, `adam_v/`. Training writes `f64` so a
//! resumed run replays bit for bit; `f32` records are accepted on load.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, ensure, Context};
use mgc_core::model::{Architecture, ModelPair, ParamStore};
use mgc_core::tensor::Matrix;
use mgc_core::trainer::{AdamW, Schedule, TrainConfig, TrainState};
use serde::{Deserialize, Serialize};

use crate::config::DataConfig;

pub const MAGIC: &[u8; 8] = b"MGCCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Self::F64 => 0,
            Self::F32 => 1,
        }
    }
}

/// JSON block of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub config: TrainConfig,
    pub data: DataConfig,
    pub schedule: Schedule,
    /// Updates completed.
    pub step: u64,
    pub adam_t: u64,
    /// Every random draw is a function of this seed and the step counter,
    /// so the pair is the whole generator state.
    pub rng_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

fn records(prefix: &str, store: &ParamStore, out: &mut Vec<Record>) {
    for (name, m) in store.names.iter().zip(&store.values) {
        out.push(Record { name: format!("{prefix}/{name}"), dims: vec![m.rows, m.cols], data: m.data.clone() });
    }
}

pub fn encode(meta: &Metadata, tensors: &[Record], dtype: Dtype) -> anyhow::Result<Vec<u8>> {
    let json = serde_json::to_vec(meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&u32::try_from(tensors.len())?.to_le_bytes());
    for r in tensors {
        ensure!(r.dims.iter().product::<usize>() == r.data.len(), "tensor {} has {} samples for dims {:?}", r.name, r.data.len(), r.dims);
        out.extend_from_slice(&u32::try_from(r.name.len())?.to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.push(dtype.tag());
        out.push(u8::try_from(r.dims.len())?);
        for d in &r.dims {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        match dtype {
            Dtype::F64 => r.data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Dtype::F32 => r.data.iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> anyhow::Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else { bail!("checkpoint truncated at byte {}", self.pos) };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> anyhow::Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> anyhow::Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into()?))
    }

    fn u64(&mut self) -> anyhow::Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into()?))
    }
}

pub fn decode(bytes: &[u8]) -> anyhow::Result<(Metadata, Vec<Record>)> {
    let mut r = Reader { bytes, pos: 0 };
    ensure!(r.take(8)? == MAGIC, "not a checkpoint (bad magic)");
    let version = r.u32()?;
    ensure!(version == VERSION, "unsupported checkpoint version {version}");
    let len = usize::try_from(r.u64()?)?;
    let meta: Metadata = serde_json::from_slice(r.take(len)?).context("checkpoint metadata")?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).context("tensor name")?;
        let dtype = r.u8()?;
        let ndim = r.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(usize::try_from(r.u64()?)?);
        }
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).context("tensor too large")?;
        let data = match dtype {
            0 => r.take(n.checked_mul(8).context("tensor too large")?)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            1 => r.take(n.checked_mul(4).context("tensor too large")?)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
            t => bail!("tensor {name}: unknown dtype tag {t}"),
        };
        tensors.push(Record { name, dims, data });
    }
    ensure!(r.pos == bytes.len(), "{} trailing bytes after the last tensor", bytes.len() - r.pos);
    Ok((meta, tensors))
}

/// Writes through a temporary sibling and renames it into place.
pub fn save(path: &Path, meta: &Metadata, state: &TrainState) -> anyhow::Result<()> {
    let mut tensors = Vec::new();
    let model = &state.model;
    records("base", &model.base, &mut tensors);
    records("momentum", &model.momentum, &mut tensors);
    records("base_buffer", &model.base_buffers, &mut tensors);
    records("momentum_buffer", &model.momentum_buffers, &mut tensors);
    let names = model.base.names.clone();
    records("adam_m", &ParamStore { names: names.clone(), values: state.optimizer.m.clone() }, &mut tensors);
    records("adam_v", &ParamStore { names, values: state.optimizer.v.clone() }, &mut tensors);
    let bytes = encode(meta, &tensors, Dtype::F64)?;
    let tmp = path.with_extension("mgc.tmp");
    let mut f = fs::File::create(&tmp).with_context(|| format!("cannot create {}", tmp.display()))?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path).with_context(|| format!("cannot move checkpoint into {}", path.display()))?;
    Ok(())
}

fn store(tensors: &[Record], prefix: &str) -> anyhow::Result<ParamStore> {
    let mut s = ParamStore::default();
    for r in tensors {
        if let Some(name) = r.name.strip_prefix(prefix).and_then(|n| n.strip_prefix('/')) {
            ensure!(r.dims.len() == 2, "tensor {} has {} dims, expected 2", r.name, r.dims.len());
            s.push(name.to_string(), Matrix::from_vec(r.dims[0], r.dims[1], r.data.clone()));
        }
    }
    Ok(s)
}

/// Loads a checkpoint and rebuilds the training state, checking every
/// tensor against the architecture in its metadata.
pub fn load(path: &Path) -> anyhow::Result<(Metadata, TrainState)> {
    let bytes = fs::read(path).with_context(|| format!("cannot read checkpoint {}", path.display()))?;
    let (meta, tensors) = decode(&bytes).with_context(|| format!("checkpoint {}", path.display()))?;
    let cfg = &meta.config;
    let arch = Architecture::new(cfg.vit.clone(), cfg.heads.clone())?;
    let model = ModelPair::from_parts(
        arch,
        store(&tensors, "base")?,
        store(&tensors, "momentum")?,
        store(&tensors, "base_buffer")?,
        store(&tensors, "momentum_buffer")?,
        cfg.momentum,
    )?;
    let m = store(&tensors, "adam_m")?;
    let v = store(&tensors, "adam_v")?;
    for (label, s) in [("adam_m", &m), ("adam_v", &v)] {
        ensure!(s.names == model.base.names, "{label} tensors do not match the base parameters");
        for (a, b) in s.values.iter().zip(&model.base.values) {
            ensure!(a.shape() == b.shape(), "{label} shape {:?} differs from parameter shape {:?}", a.shape(), b.shape());
        }
    }
    let optimizer = AdamW { m: m.values, v: v.values, t: meta.adam_t };
    let state = TrainState { model, optimizer, step: meta.step };
    Ok((meta, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use mgc_core::model::{HeadConfig, ViTConfig};

    fn tiny() -> TrainConfig {
        TrainConfig {
            vit: ViTConfig { image_side: 32, patch_size: 16, embed_dim: 8, depth: 1, num_heads: 2, ..ViTConfig::desk() },
            heads: HeadConfig { projector: vec![8, 4], predictor: vec![8, 4], ..HeadConfig::desk() },
            loss: mgc_core::contrast::LossConfig { counts: vec![(1, 2), (2, 1)], ..Default::default() },
            augment: mgc_core::augment::AugmentParams { output_side: 32, ..Default::default() },
            ..TrainConfig::desk()
        }
    }

    fn meta(cfg: &TrainConfig, step: u64) -> Metadata {
        Metadata {
            config: cfg.clone(),
            data: DataConfig::default(),
            schedule: Schedule::new(cfg, 4).unwrap(),
            step,
            adam_t: step,
            rng_seed: cfg.seed,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = tiny();
        let mut state = TrainState::new(&cfg).unwrap();
        state.optimizer.m[0].data[0] = 0.1 + 0.2;
        state.optimizer.t = 3;
        state.step = 3;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.mgc");
        save(&path, &meta(&cfg, 3), &state).unwrap();
        let (m, loaded) = load(&path).unwrap();
        assert_eq!(m, meta(&cfg, 3));
        assert_eq!(loaded.model.base, state.model.base);
        assert_eq!(loaded.model.momentum, state.model.momentum);
        assert_eq!(loaded.model.base_buffers, state.model.base_buffers);
        assert_eq!(loaded.optimizer, state.optimizer);
        assert!(!path.with_extension("mgc.tmp").exists());
    }

    #[test]
    fn f32_records_decode() {
        let cfg = tiny();
        let rec = Record { name: "x".into(), dims: vec![2, 1], data: vec![0.5, -1.25] };
        let bytes = encode(&meta(&cfg, 0), std::slice::from_ref(&rec), Dtype::F32).unwrap();
        let (_, t) = decode(&bytes).unwrap();
        assert_eq!(t, vec![rec]);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let cfg = tiny();
        let rec = Record { name: "x".into(), dims: vec![1, 1], data: vec![1.0] };
        let bytes = encode(&meta(&cfg, 0), &[rec], Dtype::F64).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
    }

    #[test]
    fn architecture_mismatch_fails_to_load() {
        let cfg = tiny();
        let state = TrainState::new(&cfg).unwrap();
        let mut other = cfg.clone();
        other.vit.embed_dim = 16;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.mgc");
        save(&path, &meta(&other, 0), &state).unwrap();
        assert!(load(&path).is_err());
    }
}
