use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mgc::commands::{self, DumpCorrArgs, GradcheckArgs, LocalizeArgs, MatchArgs, Outcome, PretrainArgs};

#[derive(Parser)]
#[command(name = "mgc", version, about = "Multi-grained contrastive pretraining and correspondence tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base and momentum encoders.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config key, e.g. `--set lr_max=3e-3`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/mgc")]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed updates.
        #[arg(long, hide = true)]
        stop_after: Option<u64>,
        #[arg(long)]
        quiet: bool,
    },
    /// Print correspondence weights between two crops as JSON Lines.
    DumpCorr {
        /// View-1 crop as `x,y,w,h[,flip]` in source pixels.
        #[arg(long)]
        crop1: String,
        #[arg(long)]
        crop2: String,
        #[arg(long, default_value = "1,2,7,14")]
        granularities: String,
        /// Use the brute-force oracle instead of the fast path.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recover view-1 cell positions from the area ratios inside one key cell.
    Localize {
        #[arg(long)]
        crop1: String,
        #[arg(long)]
        crop2: String,
        #[arg(long, default_value_t = 1)]
        c: usize,
        /// Key cell of view 2 as `u,v`.
        #[arg(long)]
        key: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients of the total loss.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Match every patch of one image to its most similar patch of another.
    Match {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image_a: PathBuf,
        #[arg(long)]
        image_b: PathBuf,
        /// Score with last-block attention instead of feature cosine.
        #[arg(long)]
        attention: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Pretrain { config, overrides, seed, out, resume, stop_after, quiet } => {
            let s = commands::pretrain(&PretrainArgs { config, overrides, seed, out, resume, stop_after, quiet })?;
            eprintln!("finished at step {} of {}; checkpoint {}", s.final_step, s.schedule.total_steps, s.last_checkpoint.display());
        }
        Command::DumpCorr { crop1, crop2, granularities, oracle, config, overrides, out } => {
            commands::dump_corr(&DumpCorrArgs { crop1, crop2, granularities, oracle, config, overrides, out })?;
        }
        Command::Localize { crop1, crop2, c, key, config, overrides, out } => {
            commands::localize_cmd(&LocalizeArgs { crop1, crop2, c, key, config, overrides, out })?;
        }
        Command::Gradcheck { config, overrides, seed, samples, eps, tolerance, corrupt_gradient } => {
            let args = GradcheckArgs { config, overrides, seed, samples, eps, tolerance, corrupt_gradient };
            let o = commands::gradcheck(&args)?;
            println!("loss {:.12}", o.loss);
            println!("checked {} coordinates, skipped {} at activation kinks", o.report.checked.len(), o.report.skipped.len());
            println!("max relative error {:.3e} at {}", o.report.max_rel_error, o.worst_path);
            for c in o.worst(5) {
                println!("  {:<40} analytic {:+.9e} numeric {:+.9e} rel {:.2e}", c.0, c.1.analytic, c.1.numeric, c.1.rel_error);
            }
            if !o.passed {
                println!("FAIL (tolerance {:.0e})", args.tolerance);
                return Err(commands::Failure::Runtime(anyhow::anyhow!(
                    "gradient check failed; worst parameter {} (relative error {:.3e})",
                    o.worst_path,
                    o.report.max_rel_error
                )));
            }
            println!("PASS (tolerance {:.0e})", args.tolerance);
        }
        Command::Match { checkpoint, image_a, image_b, attention, config, overrides, out } => {
            commands::match_cmd(&MatchArgs { checkpoint, image_a, image_b, attention, config, overrides, out })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
