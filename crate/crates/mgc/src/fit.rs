//! Training driver: epoch loop, metrics log and checkpoints.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use mgc_core::image::Image;
use mgc_core::trainer::{train_step, Schedule, StepMetrics, TrainState};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Metadata};
use crate::config::{DataKind, RunConfig};
use crate::data::{self, ImageSource};

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    /// Loss of each granularity, keyed by `c`.
    pub per_granularity: std::collections::BTreeMap<String, f64>,
    pub grad_norm: f64,
    pub batch: Vec<usize>,
    /// Seconds since the driver started.
    pub wall_time: f64,
}

impl MetricsLine {
    pub fn new(m: &StepMetrics, wall_time: f64) -> Self {
        Self {
            step: m.step,
            lr: m.lr,
            loss: m.loss,
            per_granularity: m.per_granularity.iter().map(|(c, l)| (c.to_string(), *l)).collect(),
            grad_norm: m.grad_norm,
            batch: m.batch.clone(),
            wall_time,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    pub out: PathBuf,
    /// Stop after this many completed updates (the schedule is unchanged).
    pub stop_after: Option<u64>,
    pub quiet: bool,
}

#[derive(Debug, Clone)]
pub struct FitSummary {
    pub schedule: Schedule,
    pub final_step: u64,
    pub losses: Vec<f64>,
    pub last_checkpoint: PathBuf,
}

pub fn open_source(run: &RunConfig) -> anyhow::Result<ImageSource> {
    let d = &run.data;
    match d.kind {
        DataKind::Folder => {
            let Some(path) = &d.path else { bail!("data.kind = folder needs data.path") };
            data::load_folder(path)
        }
        DataKind::Synthetic => data::synthetic(
            d.count,
            d.seed,
            mgc_core::synthetic::SyntheticParams { side: d.side, min_shapes: d.min_shapes, max_shapes: d.max_shapes },
        ),
    }
}

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt-{step:06}.mgc")
}

/// Creates `dir` if needed and proves it accepts new files.
pub fn ensure_writable(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
    let probe = dir.join(".mgc-write-probe");
    File::create(&probe).with_context(|| format!("output directory {} is not writable", dir.display()))?;
    fs::remove_file(&probe)?;
    Ok(())
}

/// Keeps only metrics lines of steps before `step`.
fn truncate_metrics(path: &Path, step: u64) -> anyhow::Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut kept = String::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        let m: MetricsLine = serde_json::from_str(&line).with_context(|| format!("malformed line in {}", path.display()))?;
        if m.step < step {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

/// Runs (or resumes) training until the schedule ends or `stop_after`.
///
/// A fresh run writes `ckpt-000000.mgc` before the first update; every
/// `checkpoint_every` updates and at the end a numbered checkpoint is
/// written, plus `last.mgc` when this call took any update.
pub fn fit(run: &RunConfig, resume: Option<(Metadata, TrainState)>, opts: &FitOptions) -> anyhow::Result<FitSummary> {
    let start = Instant::now();
    ensure_writable(&opts.out)?;
    let cfg = &run.train;
    cfg.validate()?;
    let source = open_source(run)?;
    let schedule = Schedule::new(cfg, source.len())?;
    let metrics_path = opts.out.join("metrics.jsonl");

    let mut state = match resume {
        Some((meta, state)) => {
            if meta.schedule != schedule {
                bail!("checkpoint schedule {:?} does not match this dataset and config ({:?})", meta.schedule, schedule);
            }
            truncate_metrics(&metrics_path, state.step)?;
            state
        }
        None => {
            if metrics_path.exists() {
                fs::remove_file(&metrics_path)?;
            }
            TrainState::new(cfg)?
        }
    };
    let meta_for = |state: &TrainState| Metadata {
        config: cfg.clone(),
        data: run.data.clone(),
        schedule,
        step: state.step,
        adam_t: state.optimizer.t,
        rng_seed: cfg.seed,
    };
    let save = |state: &TrainState, name: &str| -> anyhow::Result<PathBuf> {
        let path = opts.out.join(name);
        checkpoint::save(&path, &meta_for(state), state)?;
        Ok(path)
    };
    let mut last_checkpoint = if state.step == 0 { save(&state, &checkpoint_name(0))? } else { PathBuf::new() };

    let mut log = BufWriter::new(OpenOptions::new().create(true).append(true).open(&metrics_path)?);
    let end = opts.stop_after.map_or(schedule.total_steps, |s| s.min(schedule.total_steps));
    let mut losses = Vec::new();
    while state.step < end {
        let step = state.step;
        let ids = schedule.batch_indices(step, cfg.batch_size, cfg.seed);
        let images: Vec<Image> = ids.iter().map(|&i| source.get(i)).collect::<anyhow::Result<_>>()?;
        let batch: Vec<(usize, &Image)> = ids.iter().copied().zip(&images).collect();
        let metrics = match train_step(&mut state, &batch, cfg, &schedule) {
            Ok(m) => m,
            Err(e) => {
                let dump = serde_json::json!({ "error": e.to_string(), "step": step, "seed": cfg.seed, "batch": ids });
                let _ = fs::write(opts.out.join("failure.json"), dump.to_string());
                return Err(e.into());
            }
        };
        losses.push(metrics.loss);
        if step % cfg.log_every == 0 {
            let line = MetricsLine::new(&metrics, start.elapsed().as_secs_f64());
            serde_json::to_writer(&mut log, &line)?;
            log.write_all(b"\n")?;
            log.flush()?;
            if !opts.quiet {
                eprintln!("step {step:>6}  lr {:.3e}  loss {:.4}", metrics.lr, metrics.loss);
            }
        }
        if state.step % cfg.checkpoint_every == 0 {
            last_checkpoint = save(&state, &checkpoint_name(state.step))?;
        }
    }
    if last_checkpoint.as_os_str().is_empty() || state.step % cfg.checkpoint_every != 0 {
        last_checkpoint = save(&state, &checkpoint_name(state.step))?;
    }
    if !losses.is_empty() {
        save(&state, "last.mgc")?;
    }
    Ok(FitSummary { schedule, final_step: state.step, losses, last_checkpoint })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_line_shape() {
        let m = StepMetrics { step: 3, lr: 1e-3, loss: 2.5, per_granularity: vec![(1, 2.0), (14, 0.5)], grad_norm: 1.0, batch: vec![4, 1] };
        let v: serde_json::Value = serde_json::to_value(MetricsLine::new(&m, 0.25)).unwrap();
        assert_eq!(v["per_granularity"]["14"], 0.5);
        assert_eq!(v["step"], 3);
        assert_eq!(v["wall_time"], 0.25);
    }

    #[test]
    fn unwritable_output_is_a_startup_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("plain");
        fs::write(&file, b"x").unwrap();
        let err = fit(&RunConfig::default(), None, &FitOptions { out: file.join("sub"), ..Default::default() }).unwrap_err();
        assert!(err.to_string().contains("output directory"), "{err}");
    }
}
