//! Command implementations. Each returns a [`Failure`] whose kind picks the
//! process exit code: usage and configuration problems exit 2, runtime
//! failures exit 1.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use mgc_core::augment::resample;
use mgc_core::geometry::{correspondence_weights, localize};
use mgc_core::image::Image;
use mgc_core::matching::match_images;
use mgc_core::oracle::{brute_correspondences, CheckedCoordinate, fd_gradient_check, Evaluation, GradCheckOptions, GradCheckReport};
use mgc_core::trainer::{LossProbe, TrainConfig, TrainState};
use mgc_core::types::{CropBox, PatchGrid};
use mgc_core::Error as CoreError;

use crate::config::{self, Parsed, RunConfig};
use crate::fit::{self, FitOptions, FitSummary};
use crate::jsonl::{self, LocalizeLine, MatchLine};
use crate::{checkpoint, data, ppm};

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) => f.write_str(m),
            Self::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Self::Runtime(e)
    }
}

impl From<config::ConfigError> for Failure {
    fn from(e: config::ConfigError) -> Self {
        Self::Usage(format!("config error: {e}"))
    }
}

pub type Outcome<T = ()> = Result<T, Failure>;

fn usage(e: impl fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

/// Parses `x,y,w,h` with an optional fifth field `flip` (`1`, `true`,
/// `flip`) or `0`/`false`.
pub fn parse_crop(spec: &str) -> Outcome<CropBox> {
    let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
    let bad = || usage(format!("malformed crop spec {spec:?} (expected x,y,w,h[,flip])"));
    if parts.len() != 4 && parts.len() != 5 {
        return Err(bad());
    }
    let mut v = [0.0; 4];
    for (slot, p) in v.iter_mut().zip(&parts) {
        *slot = p.parse().map_err(|_| bad())?;
    }
    let flip = match parts.get(4) {
        None => false,
        Some(&("1" | "true" | "flip")) => true,
        Some(&("0" | "false")) => false,
        Some(_) => return Err(bad()),
    };
    CropBox::with_flip(v[0], v[1], v[2], v[3], flip).map_err(|e| usage(format!("crop spec {spec:?}: {e}")))
}

fn parse_usize_list(spec: &str, what: &str) -> Outcome<Vec<usize>> {
    spec.split(',').map(|s| s.trim().parse().map_err(|_| usage(format!("malformed {what} {spec:?}")))).collect()
}

/// Config file (desk defaults when absent) with `--set` overrides and an
/// optional seed override applied.
pub fn load_config(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Outcome<Parsed> {
    let mut parsed = match path {
        Some(p) => config::load(p)?,
        None => Parsed::default(),
    };
    config::apply_overrides(&mut parsed, overrides)?;
    if let Some(s) = seed {
        parsed.run.train.seed = s;
        parsed.explicit.insert("seed".into());
    }
    Ok(parsed)
}

fn write_output(out: Option<&Path>, text: &str) -> Outcome {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| runtime(anyhow::anyhow!("cannot write {}: {e}", p.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes()).map_err(runtime)?;
            stdout.flush().map_err(runtime)
        }
    }
}

fn grid_of(cfg: &TrainConfig) -> Outcome<PatchGrid> {
    PatchGrid::for_image(cfg.vit.image_side, cfg.vit.patch_size).map_err(usage)
}

#[derive(Debug, Clone, Default)]
pub struct PretrainArgs {
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    pub stop_after: Option<u64>,
    pub quiet: bool,
}

pub fn pretrain(args: &PretrainArgs) -> Outcome<FitSummary> {
    let opts = FitOptions { out: args.out.clone(), stop_after: args.stop_after, quiet: args.quiet };
    if let Some(ckpt) = &args.resume {
        if args.config.is_some() || !args.overrides.is_empty() {
            return Err(usage("--resume takes its configuration from the checkpoint; drop --config and --set"));
        }
        let (meta, state) = checkpoint::load(ckpt)?;
        if args.seed.is_some_and(|s| s != meta.config.seed) {
            return Err(usage(format!("--seed differs from the checkpoint seed {}", meta.config.seed)));
        }
        let run = RunConfig { preset: "checkpoint".into(), train: meta.config.clone(), data: meta.data.clone() };
        return Ok(fit::fit(&run, Some((meta, state)), &opts)?);
    }
    let mut parsed = load_config(args.config.as_deref(), &args.overrides, args.seed)?;
    parsed.run.train.validate().map_err(usage)?;
    fit::ensure_writable(&args.out)?;
    let source = fit::open_source(&parsed.run)?;
    let vit = &mut parsed.run.train.vit;
    if !parsed.explicit.contains("vit.pixel_mean") || !parsed.explicit.contains("vit.pixel_std") {
        let (mean, std) = data::channel_stats(&source, 256)?;
        if !parsed.explicit.contains("vit.pixel_mean") {
            vit.pixel_mean = mean;
        }
        if !parsed.explicit.contains("vit.pixel_std") {
            vit.pixel_std = std;
        }
        if !args.quiet {
            eprintln!("pixel statistics: mean {:?}, std {:?}", vit.pixel_mean, vit.pixel_std);
        }
    }
    fs::write(args.out.join("config.txt"), config::to_text(&parsed.run)).map_err(runtime)?;
    Ok(fit::fit(&parsed.run, None, &opts)?)
}

#[derive(Debug, Clone, Default)]
pub struct DumpCorrArgs {
    pub crop1: String,
    pub crop2: String,
    pub granularities: String,
    pub oracle: bool,
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub out: Option<PathBuf>,
}

pub fn dump_corr(args: &DumpCorrArgs) -> Outcome<usize> {
    let crop1 = parse_crop(&args.crop1)?;
    let crop2 = parse_crop(&args.crop2)?;
    let parsed = load_config(args.config.as_deref(), &args.overrides, None)?;
    let grid = grid_of(&parsed.run.train)?;
    let cs = parse_usize_list(&args.granularities, "granularity list")?;
    let mut text = String::new();
    let mut lines = 0;
    for &c in &cs {
        grid.cells(c).map_err(usage)?;
        let table = if args.oracle {
            brute_correspondences(&crop1, &crop2, grid, c)
        } else {
            correspondence_weights(&crop1, &crop2, grid, c).map_err(runtime)?
        };
        let rows = jsonl::corr_lines(&table);
        lines += rows.len();
        text.push_str(&jsonl::to_lines(&rows));
    }
    if lines == 0 {
        eprintln!("warning: the crops do not overlap; no correspondences emitted");
    }
    write_output(args.out.as_deref(), &text)?;
    Ok(lines)
}

#[derive(Debug, Clone, Default)]
pub struct LocalizeArgs {
    pub crop1: String,
    pub crop2: String,
    pub c: usize,
    pub key: String,
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub out: Option<PathBuf>,
}

pub fn localize_cmd(args: &LocalizeArgs) -> Outcome<Vec<LocalizeLine>> {
    let crop1 = parse_crop(&args.crop1)?;
    let crop2 = parse_crop(&args.crop2)?;
    let key = match parse_usize_list(&args.key, "key")?[..] {
        [u, v] => (u, v),
        _ => return Err(usage(format!("malformed key {:?} (expected u,v)", args.key))),
    };
    let parsed = load_config(args.config.as_deref(), &args.overrides, None)?;
    let grid = grid_of(&parsed.run.train)?;
    let cells = match localize(&crop1, &crop2, grid, args.c, key) {
        Ok(cells) => cells,
        Err(e @ CoreError::NoOverlapAtKey(..)) => return Err(runtime(anyhow::anyhow!("{e}: view 1 does not overlap this key cell"))),
        Err(e) => return Err(usage(e)),
    };
    let lines: Vec<LocalizeLine> = cells.iter().map(LocalizeLine::from).collect();
    write_output(args.out.as_deref(), &jsonl::to_lines(&lines))?;
    Ok(lines)
}

#[derive(Debug, Clone)]
pub struct GradcheckArgs {
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub seed: Option<u64>,
    pub samples: usize,
    pub eps: f64,
    pub tolerance: f64,
    /// Test hook: scales the analytic gradient so the check must fail.
    pub corrupt_gradient: bool,
}

impl Default for GradcheckArgs {
    fn default() -> Self {
        Self { config: None, overrides: Vec::new(), seed: None, samples: 200, eps: 1e-5, tolerance: 1e-5, corrupt_gradient: false }
    }
}

/// Desk model cut to two blocks and two images.
pub fn gradcheck_config() -> RunConfig {
    let mut run = RunConfig::default();
    run.train.vit.depth = 2;
    run.train.batch_size = 2;
    run
}

#[derive(Debug, Clone)]
pub struct GradcheckOutcome {
    pub report: GradCheckReport,
    pub loss: f64,
    pub worst_path: String,
    /// Parameter path of every checked coordinate, in check order.
    pub paths: Vec<String>,
    pub passed: bool,
}

impl GradcheckOutcome {
    /// The `n` checked coordinates with the largest relative error.
    pub fn worst(&self, n: usize) -> Vec<(&str, &CheckedCoordinate)> {
        let mut all: Vec<_> = self.paths.iter().map(String::as_str).zip(&self.report.checked).collect();
        all.sort_by(|a, b| b.1.rel_error.total_cmp(&a.1.rel_error));
        all.truncate(n);
        all
    }
}

pub fn gradcheck(args: &GradcheckArgs) -> Outcome<GradcheckOutcome> {
    let mut parsed = match &args.config {
        Some(p) => config::load(p)?,
        None => Parsed { run: gradcheck_config(), ..Default::default() },
    };
    config::apply_overrides(&mut parsed, &args.overrides)?;
    if let Some(s) = args.seed {
        parsed.run.train.seed = s;
    }
    let run = parsed.run;
    let cfg = &run.train;
    cfg.validate().map_err(usage)?;
    let source = fit::open_source(&run)?;
    let n = cfg.batch_size.min(source.len());
    let images: Vec<Image> = (0..n).map(|i| source.get(i)).collect::<anyhow::Result<_>>()?;
    let batch: Vec<(usize, &Image)> = images.iter().enumerate().collect();
    let model = TrainState::new(cfg).map_err(runtime)?.model;
    let probe = LossProbe::new(model, &batch, cfg, 0).map_err(runtime)?;
    let (loss, mut grad) = probe.gradient().map_err(runtime)?;
    if args.corrupt_gradient {
        grad.iter_mut().for_each(|g| *g = *g * 1.01 + 1e-6);
    }
    let opts = GradCheckOptions { eps: args.eps, samples: args.samples, seed: cfg.seed, tolerance: args.tolerance };
    let eval = |x: &[f64]| probe.evaluate(x).unwrap_or(Evaluation { value: f64::NAN, signature: 0 });
    let report = fd_gradient_check(eval, &probe.params(), &grad, &opts).map_err(|e| {
        let path = match &e {
            mgc_core::oracle::GradCheckError::NonFinite { index, .. } => param_path(&probe, *index),
            _ => String::new(),
        };
        runtime(anyhow::anyhow!("{e} {path}"))
    })?;
    let worst_path = report.worst_index.map(|i| param_path(&probe, i)).unwrap_or_default();
    let passed = report.passed(args.tolerance) && !report.checked.is_empty();
    let paths = report.checked.iter().map(|c| param_path(&probe, c.index)).collect();
    Ok(GradcheckOutcome { report, loss, worst_path, paths, passed })
}

fn param_path(probe: &LossProbe, index: usize) -> String {
    match probe.model.base.locate(index) {
        Some((name, offset)) => format!("{name}[{offset}]"),
        None => format!("#{index}"),
    }
}

#[derive(Debug, Clone, Default)]
pub struct MatchArgs {
    pub checkpoint: PathBuf,
    pub image_a: PathBuf,
    pub image_b: PathBuf,
    pub attention: bool,
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub out: Option<PathBuf>,
}

fn fit_side(img: Image, side: usize) -> Image {
    if img.width == side && img.height == side {
        return img;
    }
    let full = CropBox::new(0.0, 0.0, img.width as f64, img.height as f64).expect("decoded images are non-empty");
    resample(&img, &full, side)
}

pub fn match_cmd(args: &MatchArgs) -> Outcome<Vec<MatchLine>> {
    let (meta, state) = checkpoint::load(&args.checkpoint)?;
    if args.config.is_some() || !args.overrides.is_empty() {
        let parsed = load_config(args.config.as_deref(), &args.overrides, None)?;
        let want = &parsed.run.train;
        if want.vit != meta.config.vit || want.heads != meta.config.heads {
            return Err(runtime(anyhow::anyhow!("checkpoint {} does not match the configured architecture", args.checkpoint.display())));
        }
    }
    let side = meta.config.vit.image_side;
    let a = fit_side(ppm::read_image(&args.image_a)?, side);
    let b = fit_side(ppm::read_image(&args.image_b)?, side);
    let matches = match_images(&state.model, &a, &b, args.attention).map_err(runtime)?;
    let lines: Vec<MatchLine> = matches.iter().map(MatchLine::from).collect();
    write_output(args.out.as_deref(), &jsonl::to_lines(&lines))?;
    Ok(lines)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_specs() {
        let c = parse_crop("8, 0,224,224").unwrap();
        assert_eq!((c.x, c.w, c.hflip), (8.0, 224.0, false));
        assert!(parse_crop("0,0,10,10,flip").unwrap().hflip);
        assert!(parse_crop("0,0,10,10,1").unwrap().hflip);
        for bad in ["0,0,10", "0,0,10,x", "0,0,10,10,maybe", "0,0,0,10", ""] {
            assert_eq!(parse_crop(bad).unwrap_err().exit_code(), 2, "{bad}");
        }
    }

    #[test]
    fn shifted_localization() {
        let lines = localize_cmd(&LocalizeArgs {
            crop1: "0,0,224,224".into(),
            crop2: "8,0,224,224".into(),
            c: 1,
            key: "0,0".into(),
            out: Some(tempfile::NamedTempFile::new().unwrap().path().to_path_buf()),
            ..Default::default()
        })
        .unwrap();
        assert_eq!((lines[0].l, lines[0].x, lines[0].valid_x), (0, -8.0, true));
        assert_eq!((lines[1].l, lines[1].valid_x), (1, false));
    }

    #[test]
    fn localize_without_overlap_is_a_runtime_failure() {
        let err = localize_cmd(&LocalizeArgs {
            crop1: "0,0,100,100".into(),
            crop2: "500,500,100,100".into(),
            c: 1,
            key: "0,0".into(),
            ..Default::default()
        })
        .unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }
}
