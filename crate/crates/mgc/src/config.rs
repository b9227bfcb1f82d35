//! Flat `key = value` run configuration.
//!
//! One assignment per line; `#` starts a comment; keys are dotted paths
//! into the training config (`vit.embed_dim`, `loss.temperature`, ...) plus
//! `data.*` for the image source. `preset` (`desk` or `vit_small`) picks the
//! starting point and may appear anywhere. Lists are comma separated and
//! optional values accept `none`.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mgc_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    #[default]
    Synthetic,
    Folder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub kind: DataKind,
    pub path: Option<PathBuf>,
    pub count: usize,
    pub seed: u64,
    pub side: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { kind: DataKind::Synthetic, path: None, count: 64, seed: 0, side: 256, min_shapes: 3, max_shapes: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: String,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { preset: "desk".into(), train: TrainConfig::desk(), data: DataConfig::default() }
    }
}

/// A parsed file plus the keys it set explicitly.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Parsed {
    pub run: RunConfig,
    pub explicit: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl ConfigError {
    fn at(line: Option<usize>, message: impl Into<String>) -> Self {
        Self { line, message: message.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(n) => write!(f, "line {n}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

pub const KEYS: &[&str] = &[
    "preset",
    "epochs",
    "warmup_epochs",
    "batch_size",
    "steps",
    "lr_max",
    "lr_min",
    "weight_decay",
    "beta1",
    "beta2",
    "adam_eps",
    "grad_clip",
    "momentum",
    "seed",
    "checkpoint_every",
    "log_every",
    "loss.temperature",
    "loss.granularities",
    "loss.counts",
    "loss.symmetrize",
    "vit.image_side",
    "vit.patch_size",
    "vit.embed_dim",
    "vit.depth",
    "vit.num_heads",
    "vit.mlp_ratio",
    "vit.use_class_token",
    "vit.layer_norm_eps",
    "vit.pixel_mean",
    "vit.pixel_std",
    "heads.projector",
    "heads.predictor",
    "heads.final_affine",
    "heads.bn_eps",
    "heads.bn_momentum",
    "augment.crop_area",
    "augment.aspect_ratio",
    "augment.hflip_prob",
    "augment.jitter_prob",
    "augment.brightness",
    "augment.contrast",
    "augment.saturation",
    "augment.hue",
    "augment.grayscale_prob",
    "augment.blur_prob_t1",
    "augment.blur_prob_t2",
    "augment.blur_sigma",
    "augment.solarize_prob_t1",
    "augment.solarize_prob_t2",
    "augment.min_overlap_frac",
    "augment.max_retries",
    "augment.output_side",
    "data.kind",
    "data.path",
    "data.count",
    "data.seed",
    "data.side",
    "data.min_shapes",
    "data.max_shapes",
];

fn scalar<T: FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn list<T: FromStr>(v: &str) -> Result<Vec<T>, String> {
    v.split(',').map(|s| scalar(s.trim())).collect()
}

fn pair(v: &str) -> Result<(f64, f64), String> {
    match list::<f64>(v)?[..] {
        [a, b] => Ok((a, b)),
        _ => Err(format!("expected two comma-separated numbers, got {v:?}")),
    }
}

fn triple(v: &str) -> Result<[f64; 3], String> {
    match list::<f64>(v)?[..] {
        [a, b, c] => Ok([a, b, c]),
        [a] => Ok([a; 3]),
        _ => Err(format!("expected one or three comma-separated numbers, got {v:?}")),
    }
}

fn optional<T: FromStr>(v: &str) -> Result<Option<T>, String> {
    if v.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        scalar(v).map(Some)
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn show_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or("none".into(), T::to_string)
}

pub fn preset(name: &str) -> Result<TrainConfig, String> {
    match name {
        "desk" => Ok(TrainConfig::desk()),
        "vit_small" => Ok(TrainConfig::default()),
        _ => Err(format!("unknown preset {name:?} (expected desk or vit_small)")),
    }
}

/// Assigns one key. Unknown keys are reported by the caller.
pub fn set(run: &mut RunConfig, key: &str, v: &str) -> Result<(), String> {
    let t = &mut run.train;
    let d = &mut run.data;
    match key {
        "preset" => {
            run.train = preset(v)?;
            run.preset = v.to_string();
        }
        "epochs" => t.epochs = scalar(v)?,
        "warmup_epochs" => t.warmup_epochs = scalar(v)?,
        "batch_size" => t.batch_size = scalar(v)?,
        "steps" => t.steps = optional(v)?,
        "lr_max" => t.lr_max = scalar(v)?,
        "lr_min" => t.lr_min = scalar(v)?,
        "weight_decay" => t.weight_decay = scalar(v)?,
        "beta1" => t.beta1 = scalar(v)?,
        "beta2" => t.beta2 = scalar(v)?,
        "adam_eps" => t.adam_eps = scalar(v)?,
        "grad_clip" => t.grad_clip = optional(v)?,
        "momentum" => t.momentum = scalar(v)?,
        "seed" => t.seed = scalar(v)?,
        "checkpoint_every" => t.checkpoint_every = scalar(v)?,
        "log_every" => t.log_every = scalar(v)?,
        "loss.temperature" => t.loss.temperature = scalar(v)?,
        "loss.granularities" | "loss.counts" => {
            let values: Vec<usize> = list(v)?;
            let old = &t.loss.counts;
            let (cs, ns): (Vec<usize>, Vec<usize>) = if key == "loss.granularities" {
                let ns = if values.len() == old.len() { old.iter().map(|p| p.1).collect() } else { vec![1; values.len()] };
                (values, ns)
            } else {
                if values.len() != old.len() {
                    return Err(format!("{} counts for {} granularities", values.len(), old.len()));
                }
                (old.iter().map(|p| p.0).collect(), values)
            };
            t.loss.counts = cs.into_iter().zip(ns).collect();
        }
        "loss.symmetrize" => t.loss.symmetrize = scalar(v)?,
        "vit.image_side" => t.vit.image_side = scalar(v)?,
        "vit.patch_size" => t.vit.patch_size = scalar(v)?,
        "vit.embed_dim" => t.vit.embed_dim = scalar(v)?,
        "vit.depth" => t.vit.depth = scalar(v)?,
        "vit.num_heads" => t.vit.num_heads = scalar(v)?,
        "vit.mlp_ratio" => t.vit.mlp_ratio = scalar(v)?,
        "vit.use_class_token" => t.vit.use_class_token = scalar(v)?,
        "vit.layer_norm_eps" => t.vit.layer_norm_eps = scalar(v)?,
        "vit.pixel_mean" => t.vit.pixel_mean = triple(v)?,
        "vit.pixel_std" => t.vit.pixel_std = triple(v)?,
        "heads.projector" => t.heads.projector = list(v)?,
        "heads.predictor" => t.heads.predictor = list(v)?,
        "heads.final_affine" => t.heads.final_affine = scalar(v)?,
        "heads.bn_eps" => t.heads.bn_eps = scalar(v)?,
        "heads.bn_momentum" => t.heads.bn_momentum = scalar(v)?,
        "augment.crop_area" => t.augment.crop_area_range = pair(v)?,
        "augment.aspect_ratio" => t.augment.aspect_ratio_range = pair(v)?,
        "augment.hflip_prob" => t.augment.hflip_prob = scalar(v)?,
        "augment.jitter_prob" => t.augment.jitter_prob = scalar(v)?,
        "augment.brightness" => t.augment.brightness = scalar(v)?,
        "augment.contrast" => t.augment.contrast = scalar(v)?,
        "augment.saturation" => t.augment.saturation = scalar(v)?,
        "augment.hue" => t.augment.hue = scalar(v)?,
        "augment.grayscale_prob" => t.augment.grayscale_prob = scalar(v)?,
        "augment.blur_prob_t1" => t.augment.blur_prob_t1 = scalar(v)?,
        "augment.blur_prob_t2" => t.augment.blur_prob_t2 = scalar(v)?,
        "augment.blur_sigma" => t.augment.blur_sigma_range = pair(v)?,
        "augment.solarize_prob_t1" => t.augment.solarize_prob_t1 = scalar(v)?,
        "augment.solarize_prob_t2" => t.augment.solarize_prob_t2 = scalar(v)?,
        "augment.min_overlap_frac" => t.augment.min_overlap_frac = scalar(v)?,
        "augment.max_retries" => t.augment.max_retries = scalar(v)?,
        "augment.output_side" => t.augment.output_side = scalar(v)?,
        "data.kind" => {
            d.kind = match v {
                "synthetic" => DataKind::Synthetic,
                "folder" => DataKind::Folder,
                _ => return Err(format!("unknown data kind {v:?} (expected synthetic or folder)")),
            }
        }
        "data.path" => d.path = if v.eq_ignore_ascii_case("none") { None } else { Some(PathBuf::from(v)) },
        "data.count" => d.count = scalar(v)?,
        "data.seed" => d.seed = scalar(v)?,
        "data.side" => d.side = scalar(v)?,
        "data.min_shapes" => d.min_shapes = scalar(v)?,
        "data.max_shapes" => d.max_shapes = scalar(v)?,
        _ => return Err(unknown_key(key)),
    }
    Ok(())
}

/// Current value of `key` in the syntax [`set`] accepts.
pub fn get(run: &RunConfig, key: &str) -> Option<String> {
    let t = &run.train;
    let d = &run.data;
    let a = &t.augment;
    let pair = |p: (f64, f64)| format!("{},{}", p.0, p.1);
    Some(match key {
        "preset" => run.preset.clone(),
        "epochs" => t.epochs.to_string(),
        "warmup_epochs" => t.warmup_epochs.to_string(),
        "batch_size" => t.batch_size.to_string(),
        "steps" => show_opt(&t.steps),
        "lr_max" => t.lr_max.to_string(),
        "lr_min" => t.lr_min.to_string(),
        "weight_decay" => t.weight_decay.to_string(),
        "beta1" => t.beta1.to_string(),
        "beta2" => t.beta2.to_string(),
        "adam_eps" => t.adam_eps.to_string(),
        "grad_clip" => show_opt(&t.grad_clip),
        "momentum" => t.momentum.to_string(),
        "seed" => t.seed.to_string(),
        "checkpoint_every" => t.checkpoint_every.to_string(),
        "log_every" => t.log_every.to_string(),
        "loss.temperature" => t.loss.temperature.to_string(),
        "loss.granularities" => join(&t.loss.granularities()),
        "loss.counts" => join(&t.loss.counts.iter().map(|p| p.1).collect::<Vec<_>>()),
        "loss.symmetrize" => t.loss.symmetrize.to_string(),
        "vit.image_side" => t.vit.image_side.to_string(),
        "vit.patch_size" => t.vit.patch_size.to_string(),
        "vit.embed_dim" => t.vit.embed_dim.to_string(),
        "vit.depth" => t.vit.depth.to_string(),
        "vit.num_heads" => t.vit.num_heads.to_string(),
        "vit.mlp_ratio" => t.vit.mlp_ratio.to_string(),
        "vit.use_class_token" => t.vit.use_class_token.to_string(),
        "vit.layer_norm_eps" => t.vit.layer_norm_eps.to_string(),
        "vit.pixel_mean" => join(&t.vit.pixel_mean),
        "vit.pixel_std" => join(&t.vit.pixel_std),
        "heads.projector" => join(&t.heads.projector),
        "heads.predictor" => join(&t.heads.predictor),
        "heads.final_affine" => t.heads.final_affine.to_string(),
        "heads.bn_eps" => t.heads.bn_eps.to_string(),
        "heads.bn_momentum" => t.heads.bn_momentum.to_string(),
        "augment.crop_area" => pair(a.crop_area_range),
        "augment.aspect_ratio" => pair(a.aspect_ratio_range),
        "augment.hflip_prob" => a.hflip_prob.to_string(),
        "augment.jitter_prob" => a.jitter_prob.to_string(),
        "augment.brightness" => a.brightness.to_string(),
        "augment.contrast" => a.contrast.to_string(),
        "augment.saturation" => a.saturation.to_string(),
        "augment.hue" => a.hue.to_string(),
        "augment.grayscale_prob" => a.grayscale_prob.to_string(),
        "augment.blur_prob_t1" => a.blur_prob_t1.to_string(),
        "augment.blur_prob_t2" => a.blur_prob_t2.to_string(),
        "augment.blur_sigma" => pair(a.blur_sigma_range),
        "augment.solarize_prob_t1" => a.solarize_prob_t1.to_string(),
        "augment.solarize_prob_t2" => a.solarize_prob_t2.to_string(),
        "augment.min_overlap_frac" => a.min_overlap_frac.to_string(),
        "augment.max_retries" => a.max_retries.to_string(),
        "augment.output_side" => a.output_side.to_string(),
        "data.kind" => match d.kind {
            DataKind::Synthetic => "synthetic".into(),
            DataKind::Folder => "folder".into(),
        },
        "data.path" => d.path.as_ref().map_or("none".into(), |p| p.display().to_string()),
        "data.count" => d.count.to_string(),
        "data.seed" => d.seed.to_string(),
        "data.side" => d.side.to_string(),
        "data.min_shapes" => d.min_shapes.to_string(),
        "data.max_shapes" => d.max_shapes.to_string(),
        _ => return None,
    })
}

fn unknown_key(key: &str) -> String {
    format!("unknown key {key:?}; valid keys: {}", KEYS.join(", "))
}

fn split_line(raw: &str) -> Option<Result<(&str, &str), String>> {
    let line = raw.split('#').next().unwrap_or("").trim();
    if line.is_empty() {
        return None;
    }
    Some(match line.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim(), v.trim())),
        _ => Err(format!("expected `key = value`, got {line:?}")),
    })
}

pub fn parse(text: &str) -> Result<Parsed, ConfigError> {
    let mut lines = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if let Some(r) = split_line(raw) {
            let (k, v) = r.map_err(|m| ConfigError::at(Some(i + 1), m))?;
            lines.push((i + 1, k, v));
        }
    }
    let mut parsed = Parsed::default();
    let mut seen = BTreeSet::new();
    // the preset replaces the whole training config, so it goes first
    for &(n, k, v) in lines.iter().filter(|l| l.1 == "preset") {
        set(&mut parsed.run, k, v).map_err(|m| ConfigError::at(Some(n), m))?;
    }
    for &(n, k, v) in &lines {
        if !seen.insert(k) {
            return Err(ConfigError::at(Some(n), format!("duplicate key {k:?}")));
        }
        if k == "preset" {
            continue;
        }
        set(&mut parsed.run, k, v).map_err(|m| ConfigError::at(Some(n), if KEYS.contains(&k) { format!("{k}: {m}") } else { m }))?;
    }
    parsed.explicit = seen.into_iter().map(String::from).collect();
    Ok(parsed)
}

pub fn load(path: &Path) -> Result<Parsed, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::at(None, format!("cannot read config {}: {e}", path.display())))?;
    parse(&text)
}

/// Applies `key=value` overrides from the command line.
pub fn apply_overrides(parsed: &mut Parsed, overrides: &[String]) -> Result<(), ConfigError> {
    for o in overrides {
        let Some((k, v)) = o.split_once('=') else {
            return Err(ConfigError::at(None, format!("override {o:?} is not key=value")));
        };
        let (k, v) = (k.trim(), v.trim());
        set(&mut parsed.run, k, v).map_err(|m| ConfigError::at(None, format!("--set {k}: {m}")))?;
        parsed.explicit.insert(k.to_string());
    }
    Ok(())
}

/// Every key with its current value, in [`KEYS`] order.
pub fn to_text(run: &RunConfig) -> String {
    KEYS.iter().map(|k| format!("{k} = {}\n", get(run, k).expect("every listed key has a getter"))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips() {
        let run = RunConfig::default();
        let text = to_text(&run);
        let parsed = parse(&text).unwrap();
        assert_eq!(parsed.run, run);
        assert_eq!(parsed.explicit.len(), KEYS.len());
    }

    #[test]
    fn values_and_comments() {
        let p = parse("# desk run\nlr_max = 3e-3  # faster\nsteps=none\nloss.granularities = 1,2\nvit.pixel_std = 0.2\n\n").unwrap();
        assert_eq!(p.run.train.lr_max, 3e-3);
        assert_eq!(p.run.train.steps, None);
        assert_eq!(p.run.train.loss.counts, vec![(1, 1), (2, 1)]);
        assert_eq!(p.run.train.vit.pixel_std, [0.2; 3]);
        assert!(p.explicit.contains("lr_max"));
    }

    #[test]
    fn preset_applies_before_other_keys() {
        let p = parse("epochs = 3\npreset = vit_small\n").unwrap();
        assert_eq!(p.run.train.epochs, 3);
        assert_eq!(p.run.train.vit.embed_dim, 384);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = parse("epochs = 3\n\nbogus = 1\n").unwrap_err();
        assert_eq!(e.line, Some(3));
        assert!(e.message.contains("valid keys") && e.message.contains("vit.embed_dim"), "{e}");
        assert_eq!(parse("epochs = x").unwrap_err().line, Some(1));
        assert_eq!(parse("a\n").unwrap_err().line, Some(1));
        assert_eq!(parse("seed = 1\nseed = 2").unwrap_err().line, Some(2));
        assert!(parse("loss.counts = 1,2").is_err());
    }

    #[test]
    fn overrides() {
        let mut p = parse("").unwrap();
        apply_overrides(&mut p, &["seed=5".into(), "data.kind = folder".into()]).unwrap();
        assert_eq!(p.run.train.seed, 5);
        assert_eq!(p.run.data.kind, DataKind::Folder);
        assert!(apply_overrides(&mut p, &["nokey".into()]).is_err());
        assert!(apply_overrides(&mut p, &["x.y=1".into()]).unwrap_err().message.contains("valid keys"));
    }
}
