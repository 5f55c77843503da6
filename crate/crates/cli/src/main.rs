use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dynvo_cli::commands::{cmd_eval, cmd_run, cmd_segment, cmd_synth, EvalMode, SegmentInputs};
use dynvo_cli::config::{parse_delta, RunConfig};
use dynvo_cli::{exit, CliError};
use dynvo::evaluation::RpeDelta;
use log::error;

/// Dense RGB-D visual odometry that removes moving objects from depth.
#[derive(Parser)]
#[command(name = "dynvo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the trajectory of a TUM-layout sequence.
    Run {
        /// Dataset directory (rgb.txt, depth.txt, ...).
        dataset: Option<PathBuf>,
        #[command(flatten)]
        opts: PipelineArgs,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Process pairs independently and in parallel.
        #[arg(long)]
        no_warm_start: bool,
    },
    /// Segment moving objects in frame A of one RGB-D pair.
    Segment {
        rgb_a: PathBuf,
        depth_a: PathBuf,
        rgb_b: PathBuf,
        depth_b: PathBuf,
        #[command(flatten)]
        opts: PipelineArgs,
        /// Calibration file (key = value).
        #[arg(long)]
        intrinsics: Option<PathBuf>,
        /// Output directory for mask.png and coefficients.csv.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Compare an estimated trajectory with ground truth; prints CSV.
    Eval {
        groundtruth: PathBuf,
        estimate: PathBuf,
        #[arg(long, value_enum, default_value = "rpe")]
        mode: Mode,
        /// RPE spacing: seconds (`1`, `0.5s`) or frames (`10f`).
        #[arg(long, value_parser = parse_delta, default_value = "1s")]
        delta: RpeDelta,
    },
    /// Render a synthetic scene file into a TUM-layout dataset.
    Synth {
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Rpe,
    Ate,
}

/// Settings shared by `run` and `segment`; they override the config file.
#[derive(Args)]
struct PipelineArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// RPE spacing for the metrics written by `run`.
    #[arg(long)]
    delta: Option<String>,
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long)]
    alpha_i: Option<f64>,
    #[arg(long)]
    pyramid_levels: Option<usize>,
    /// At most 7.
    #[arg(long)]
    max_refine_iters: Option<usize>,
    /// Write the final mask of every pair.
    #[arg(long)]
    debug_masks: bool,
}

impl PipelineArgs {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut o = Vec::new();
        let mut push = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                o.push((k, v));
            }
        };
        push("seed", self.seed.map(|v| v.to_string()));
        push("delta", self.delta.clone());
        push("block_size", self.block_size.map(|v| v.to_string()));
        push("alpha_i", self.alpha_i.map(|v| v.to_string()));
        push("pyramid_levels", self.pyramid_levels.map(|v| v.to_string()));
        push("max_refine_iters", self.max_refine_iters.map(|v| v.to_string()));
        push("debug_masks", self.debug_masks.then(|| "true".to_string()));
        o
    }
}

fn execute(command: Command) -> Result<u8, CliError> {
    match command {
        Command::Run {
            dataset,
            opts,
            out,
            no_warm_start,
        } => {
            let mut overrides = opts.overrides();
            if let Some(d) = dataset {
                overrides.push(("dataset", d.display().to_string()));
            }
            if let Some(o) = out {
                overrides.push(("out", o.display().to_string()));
            }
            if no_warm_start {
                overrides.push(("warm_start", "false".into()));
            }
            let cfg = RunConfig::resolve(opts.config.as_deref(), &overrides)?;
            let outcome = cmd_run(&cfg)?;
            if let Some(m) = &outcome.metrics {
                print!("{}", m.csv());
            }
            Ok(outcome.exit_code())
        }
        Command::Segment {
            rgb_a,
            depth_a,
            rgb_b,
            depth_b,
            opts,
            intrinsics,
            out,
        } => {
            let cfg = RunConfig::resolve(opts.config.as_deref(), &opts.overrides())?;
            let inputs = SegmentInputs {
                rgb_a,
                depth_a,
                rgb_b,
                depth_b,
                intrinsics,
            };
            cmd_segment(&inputs, &cfg, &out.join("mask.png"), &out.join("coefficients.csv"))?;
            Ok(exit::SUCCESS)
        }
        Command::Eval {
            groundtruth,
            estimate,
            mode,
            delta,
        } => {
            let mode = match mode {
                Mode::Rpe => EvalMode::Rpe,
                Mode::Ate => EvalMode::Ate,
            };
            print!("{}", cmd_eval(&groundtruth, &estimate, mode, delta)?);
            Ok(exit::SUCCESS)
        }
        Command::Synth { scene, out, seed } => {
            cmd_synth(&scene, &out, seed)?;
            Ok(exit::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DYNVO_LOG", "warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(exit::FATAL)
        }
    }
}
