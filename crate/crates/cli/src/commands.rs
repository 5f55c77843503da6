//! The four subcommands, callable without going through argument parsing.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dynvo::dataset_io::{
    load_tum, read_intrinsics, read_trajectory, write_trajectory, Trajectory, INTRINSICS_FILE,
};
use dynvo::evaluation::{
    absolute_trajectory_error, relative_pose_error, report_csv_row, MetricReport, RpeDelta, REPORT_HEADER,
};
use dynvo::geometry::{Intrinsics, Pose};
use dynvo::imaging::{load_depth_png, load_intensity_png, Frame};
use dynvo::motion_mask::{partition_regions, MotionMask, RegionGrid};
use dynvo::refine::{process_pair, run_sequence_with, PairResult, PairSummary, SequenceOptions};
use dynvo::synth::{parse_scene, render_sequence, write_tum_dataset, RenderedSequence};
use log::{info, warn};

use crate::config::RunConfig;
use crate::{exit, CliError, Result};

pub const TRAJECTORY_FILE: &str = "trajectory.txt";
pub const STATS_FILE: &str = "pair_stats.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "run_config.txt";
pub const MASK_DIR: &str = "masks";

pub const STATS_HEADER: &str =
    "index,timestamp,fallback,iterations,gn_iterations,objective,valid_count,mask_change,dynamic_fraction,error";

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn csv_field(text: &str) -> String {
    if text.contains([',', '"', '\n']) {
        format!("\"{}\"", text.replace('"', "\"\""))
    } else {
        text.to_string()
    }
}

/// One CSV row per consecutive pair.
pub fn pair_stats_csv(pairs: &[PairSummary]) -> String {
    let mut out = format!("{STATS_HEADER}\n");
    for p in pairs {
        let last = p.history.last();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            p.index,
            p.timestamp,
            u8::from(p.fallback),
            p.iterations,
            p.gn_stats.len(),
            last.map_or(f64::NAN, |h| h.objective),
            last.map_or(0, |h| h.valid_count),
            last.map_or(f64::NAN, |h| h.mask_change),
            p.dynamic_fraction,
            csv_field(p.error.as_deref().unwrap_or("")),
        );
    }
    out
}

/// Trajectory metrics against a ground truth. A metric is absent when the
/// trajectories do not overlap enough to compute it (e.g. a sequence shorter
/// than the RPE spacing).
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub rpe: Option<MetricReport>,
    pub ate: Option<MetricReport>,
}

fn skipped(name: &str, r: dynvo::Result<MetricReport>) -> Option<MetricReport> {
    r.map_err(|e| warn!("{name} skipped: {e}")).ok()
}

impl Metrics {
    pub fn compute(gt: &Trajectory, est: &Trajectory, delta: RpeDelta) -> Self {
        Metrics {
            rpe: skipped("RPE", relative_pose_error(gt, est, delta)),
            ate: skipped("ATE", absolute_trajectory_error(gt, est)),
        }
    }

    pub fn csv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        for (name, report) in [("rpe", &self.rpe), ("ate", &self.ate)] {
            if let Some(r) = report {
                out.push_str(&report_csv_row(name, r));
                out.push('\n');
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub trajectory: Trajectory,
    pub pairs: Vec<PairSummary>,
    pub fallback_count: usize,
    /// Present when the dataset ships `groundtruth.txt`.
    pub metrics: Option<Metrics>,
    pub out_dir: PathBuf,
}

impl RunOutcome {
    pub fn exit_code(&self) -> u8 {
        if self.fallback_count > 0 {
            exit::PARTIAL
        } else {
            exit::SUCCESS
        }
    }
}

/// Runs the odometry over `cfg.dataset` and writes results into `cfg.out`.
pub fn cmd_run(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let dataset = cfg
        .dataset
        .as_deref()
        .ok_or_else(|| CliError::Usage("no dataset directory given".into()))?;
    let out = cfg
        .out
        .as_deref()
        .ok_or_else(|| CliError::Usage("no output directory given (--out)".into()))?;
    let seq = load_tum(dataset, cfg.association_tolerance)?;
    info!("{}: {} associated frames", dataset.display(), seq.len());
    create_dir(out)?;
    write_file(&out.join(CONFIG_FILE), &cfg.to_text())?;

    let mask_dir = out.join(MASK_DIR);
    if cfg.debug_masks {
        create_dir(&mask_dir)?;
    }
    let sink = |index: usize, r: &PairResult| {
        if !cfg.debug_masks {
            return;
        }
        let path = mask_dir.join(format!("{:.6}.png", seq.entries[index - 1].timestamp));
        if let Err(e) = r.mask.save_png(&path) {
            warn!("could not write {}: {e}", path.display());
        }
    };
    let opts = SequenceOptions {
        warm_start: cfg.warm_start,
    };
    let result = run_sequence_with(seq.len(), |i| seq.load_frame(i), &seq.intrinsics, &cfg.refine, opts, &sink)?;

    let traj_path = out.join(TRAJECTORY_FILE);
    write_trajectory(&traj_path, &result.trajectory)?;
    write_file(&out.join(STATS_FILE), &pair_stats_csv(&result.pairs))?;

    // Evaluate what was written, so external evaluation of the file agrees.
    let metrics = match &seq.groundtruth {
        Some(gt) => {
            let est = read_trajectory(&traj_path)?;
            let m = Metrics::compute(gt, &est, cfg.delta);
            write_file(&out.join(METRICS_FILE), &m.csv())?;
            if let Some(rpe) = &m.rpe {
                info!("RPE trans RMSE {:.4}", rpe.trans_rmse);
            }
            if let Some(ate) = &m.ate {
                info!("ATE trans RMSE {:.4}", ate.trans_rmse);
            }
            Some(m)
        }
        None => None,
    };
    let fallback_count = result.fallback_count();
    if fallback_count > 0 {
        warn!("{fallback_count} of {} pairs fell back to constant velocity", result.pairs.len());
    }
    Ok(RunOutcome {
        trajectory: result.trajectory,
        pairs: result.pairs,
        fallback_count,
        metrics,
        out_dir: out.to_path_buf(),
    })
}

/// Inputs of [`cmd_segment`].
#[derive(Debug, Clone)]
pub struct SegmentInputs {
    pub rgb_a: PathBuf,
    pub depth_a: PathBuf,
    pub rgb_b: PathBuf,
    pub depth_b: PathBuf,
    /// Calibration file; defaults to `intrinsics.txt` of the TUM directory
    /// holding `rgb_a`, then to the TUM default camera.
    pub intrinsics: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct SegmentOutcome {
    pub mask: MotionMask,
    pub pose: Pose,
    pub coefficients_csv: String,
}

fn segment_intrinsics(inputs: &SegmentInputs) -> Result<Intrinsics> {
    if let Some(path) = &inputs.intrinsics {
        return Ok(read_intrinsics(path)?);
    }
    let sibling = inputs
        .rgb_a
        .parent()
        .and_then(Path::parent)
        .map(|d| d.join(INTRINSICS_FILE))
        .filter(|p| p.exists());
    match sibling {
        Some(p) => Ok(read_intrinsics(&p)?),
        None => Ok(Intrinsics::tum_default()),
    }
}

fn load_pair_frame(rgb: &Path, depth: &Path, timestamp: f64, k: &Intrinsics) -> Result<Frame> {
    let intensity = load_intensity_png(rgb)?;
    let depth = load_depth_png(depth, k.depth_scale)?;
    Ok(Frame::new(timestamp, intensity, depth)?)
}

/// Clustering, pre-elimination and a single refinement iteration on one
/// pair. Writes the final mask of frame A and the per-region coefficients.
pub fn cmd_segment(inputs: &SegmentInputs, cfg: &RunConfig, mask_out: &Path, csv_out: &Path) -> Result<SegmentOutcome> {
    let k = segment_intrinsics(inputs)?;
    let a = load_pair_frame(&inputs.rgb_a, &inputs.depth_a, 0.0, &k)?;
    let b = load_pair_frame(&inputs.rgb_b, &inputs.depth_b, 1.0, &k)?;
    if a.width() != b.width() || a.height() != b.height() {
        return Err(dynvo::Error::InvalidArgument(format!(
            "frame A is {}x{} but frame B is {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        ))
        .into());
    }
    if a.width() != k.width || a.height() != k.height {
        return Err(dynvo::Error::InvalidArgument(format!(
            "images are {}x{} but the intrinsics expect {}x{}",
            a.width(),
            a.height(),
            k.width,
            k.height
        ))
        .into());
    }
    let mut refine = cfg.refine.clone();
    refine.max_refine_iters = 1;
    let result = process_pair(&a, &b, &k, &Pose::identity(), &refine).map_err(|e| CliError::Core(e.error))?;

    for path in [mask_out, csv_out] {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
    }
    result.mask.save_png(mask_out)?;
    let grid = partition_regions(a.width(), a.height(), cfg.refine.segmentation.block)?;
    let csv = coefficients_csv(&result, &grid);
    write_file(csv_out, &csv)?;
    Ok(SegmentOutcome {
        mask: result.mask,
        pose: result.pose,
        coefficients_csv: csv,
    })
}

fn coefficients_csv(result: &PairResult, grid: &RegionGrid) -> String {
    let pre = &result.pre;
    let mut out = String::from("region,x0,y0,x1,y1,coefficient,triggered,moving_cluster\n");
    for (r, c) in pre.coefficients.iter().enumerate() {
        let (x0, y0, x1, y1) = grid.bounds(r);
        let cluster = pre
            .triggered
            .iter()
            .position(|&t| t == r)
            .and_then(|i| pre.moving_clusters[i]);
        let triggered = u8::from(pre.triggered.contains(&r));
        let cluster = cluster.map_or(String::new(), |c| c.to_string());
        let _ = writeln!(out, "{r},{x0},{y0},{x1},{y1},{c},{triggered},{cluster}");
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Rpe,
    Ate,
}

/// Metrics of `est` against `gt` as a CSV header plus one row.
pub fn cmd_eval(gt: &Path, est: &Path, mode: EvalMode, delta: RpeDelta) -> Result<String> {
    let gt = read_trajectory(gt)?;
    let est = read_trajectory(est)?;
    let (label, report) = match mode {
        EvalMode::Rpe => ("rpe", relative_pose_error(&gt, &est, delta)?),
        EvalMode::Ate => ("ate", absolute_trajectory_error(&gt, &est)?),
    };
    Ok(format!("{REPORT_HEADER}\n{}\n", report_csv_row(label, &report)))
}

/// Renders a scene file into a TUM-layout directory.
pub fn cmd_synth(scene: &Path, out: &Path, seed: u64) -> Result<RenderedSequence> {
    let text = fs::read_to_string(scene).map_err(|e| CliError::io(scene, e))?;
    let spec = parse_scene(&text, scene)?;
    let seq = render_sequence(&spec, seed)?;
    write_tum_dataset(out, &seq)?;
    info!("wrote {} frames to {}", seq.frames.len(), out.display());
    Ok(seq)
}
