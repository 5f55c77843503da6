//! Outer loop: pre-eliminate, align, reject outliers, re-align.

use log::{debug, warn};
use rayon::prelude::*;

use crate::alignment::{gauss_newton_align, reject_outliers, AlignmentConfig, IterationStats};
use crate::clustering::{cluster_count_clamped, connected_components, kmeans_depth, DepthStats, MAX_CLUSTERS};
use crate::dataset_io::Trajectory;
use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose};
use crate::imaging::Frame;
use crate::motion_mask::{partition_regions, pre_eliminate_with, MaskState, MotionMask, PreElimination, SegmentationConfig};

/// Hard cap on refinement iterations per pair.
pub const MAX_REFINE_ITERS: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct RefineConfig {
    pub alignment: AlignmentConfig,
    pub segmentation: SegmentationConfig,
    /// At most [`MAX_REFINE_ITERS`].
    pub max_refine_iters: usize,
    /// Stop once fewer than this fraction of pixels change state.
    pub change_tol: f64,
    pub max_clusters: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            alignment: AlignmentConfig::default(),
            segmentation: SegmentationConfig::default(),
            max_refine_iters: MAX_REFINE_ITERS,
            change_tol: 0.005,
            max_clusters: MAX_CLUSTERS,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        self.alignment.validate()?;
        self.segmentation.validate()?;
        if !(1..=MAX_REFINE_ITERS).contains(&self.max_refine_iters) {
            return Err(Error::InvalidArgument(format!(
                "max_refine_iters must be in 1..={MAX_REFINE_ITERS}, got {}",
                self.max_refine_iters
            )));
        }
        if !(0.0..=1.0).contains(&self.change_tol) {
            return Err(Error::InvalidArgument("change_tol must be in [0, 1]".into()));
        }
        if self.max_clusters == 0 {
            return Err(Error::InvalidArgument("max_clusters must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineIteration {
    /// Objective of the alignment on the mask entering this iteration.
    pub objective: f64,
    pub valid_count: usize,
    /// Fraction of pixels whose state changed in this iteration's rejection.
    pub mask_change: f64,
    pub gn_iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairResult {
    /// Maps frame-A coordinates to frame-B coordinates.
    pub pose: Pose,
    pub mask: MotionMask,
    pub pre: PreElimination,
    pub iterations: usize,
    pub history: Vec<RefineIteration>,
    /// Gauss–Newton log of every refinement iteration, tagged by iteration.
    pub gn_stats: Vec<(usize, IterationStats)>,
}

impl PairResult {
    pub fn dynamic_fraction(&self) -> f64 {
        let n = self.mask.width() * self.mask.height();
        if n == 0 {
            0.0
        } else {
            self.mask.count(MaskState::Dynamic) as f64 / n as f64
        }
    }
}

/// A failed pair, with the best pose found before the failure.
#[derive(Debug, thiserror::Error)]
#[error("{error}")]
pub struct PairError {
    pub error: Error,
    pub best_pose: Pose,
}

/// Depth clusters, pre-elimination and iterative refinement for one pair.
pub fn process_pair(
    frame_a: &Frame,
    frame_b: &Frame,
    k: &Intrinsics,
    init: &Pose,
    cfg: &RefineConfig,
) -> std::result::Result<PairResult, PairError> {
    let fail = |error: Error, best_pose: &Pose| PairError {
        error,
        best_pose: *best_pose,
    };
    cfg.validate().map_err(|e| fail(e, init))?;
    if frame_a.width() != frame_b.width() || frame_a.height() != frame_b.height() {
        return Err(fail(Error::InvalidArgument("frame dimensions differ".into()), init));
    }
    let a = frame_a.hole_filled();
    let b = frame_b.hole_filled();

    let stats = DepthStats::from_depth(&a.depth).map_err(|e| fail(e, init))?;
    let n = cluster_count_clamped(&stats, cfg.max_clusters);
    let cmap = kmeans_depth(&a.depth, n).map_err(|e| fail(e, init))?;
    let components = connected_components(&cmap);
    let grid = partition_regions(a.width(), a.height(), cfg.segmentation.block).map_err(|e| fail(e, init))?;
    let pre = pre_eliminate_with(&a, &b, &cmap, &components, &grid, &cfg.segmentation).map_err(|e| fail(e, init))?;
    debug!(
        "{} clusters, {} of {} regions triggered",
        n,
        pre.triggered.len(),
        grid.len()
    );

    let mut pose = *init;
    let mut mask = pre.mask.clone();
    let mut history = Vec::new();
    let mut gn_stats = Vec::new();
    for iter in 0..cfg.max_refine_iters {
        let al = gauss_newton_align(&a, &b, &pose, &mask, k, &cfg.alignment).map_err(|e| fail(e, &pose))?;
        let next = reject_outliers(&al.residuals, &mask, &components, &cfg.alignment).map_err(|e| fail(e, &al.pose))?;
        let change = next.change_fraction(&mask);
        history.push(RefineIteration {
            objective: al.residuals.objective,
            valid_count: al.residuals.valid_count,
            mask_change: change,
            gn_iterations: al.stats.len(),
        });
        gn_stats.extend(al.stats.iter().map(|s| (iter, *s)));
        pose = al.pose;
        mask = next;
        if change < cfg.change_tol {
            break;
        }
    }
    assert!(history.len() <= MAX_REFINE_ITERS);
    Ok(PairResult {
        pose,
        mask,
        pre,
        iterations: history.len(),
        history,
        gn_stats,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceOptions {
    /// Initialise each pair with the previous relative pose. Disabling it
    /// makes pairs independent so they can run in parallel.
    pub warm_start: bool,
}

impl Default for SequenceOptions {
    fn default() -> Self {
        SequenceOptions { warm_start: true }
    }
}

/// Outcome of one consecutive pair (`index - 1` → `index`).
#[derive(Debug, Clone, PartialEq)]
pub struct PairSummary {
    pub index: usize,
    pub timestamp: f64,
    /// Relative pose used for chaining.
    pub relative: Pose,
    /// True when alignment failed and the previous relative pose was reused.
    pub fallback: bool,
    pub error: Option<String>,
    pub iterations: usize,
    pub history: Vec<RefineIteration>,
    pub gn_stats: Vec<(usize, IterationStats)>,
    pub dynamic_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceResult {
    /// Camera-to-world poses in the first camera's frame.
    pub trajectory: Trajectory,
    pub pairs: Vec<PairSummary>,
}

impl SequenceResult {
    pub fn fallback_count(&self) -> usize {
        self.pairs.iter().filter(|p| p.fallback).count()
    }
}

/// [`run_sequence_with`] over frames already in memory.
pub fn run_sequence(frames: &[Frame], k: &Intrinsics, cfg: &RefineConfig, opts: SequenceOptions) -> Result<SequenceResult> {
    run_sequence_with(frames.len(), |i| Ok(frames[i].clone()), k, cfg, opts, &|_, _| {})
}

type PairOutcome = (std::result::Result<PairResult, PairError>, f64);

/// Chains consecutive pairs into a trajectory. Frames are loaded on demand
/// by `load`; `sink` sees every successful pair (e.g. to export masks).
pub fn run_sequence_with<L>(
    count: usize,
    load: L,
    k: &Intrinsics,
    cfg: &RefineConfig,
    opts: SequenceOptions,
    sink: &(dyn Fn(usize, &PairResult) + Sync),
) -> Result<SequenceResult>
where
    L: Fn(usize) -> Result<Frame> + Sync,
{
    cfg.validate()?;
    if count < 2 {
        return Err(Error::InsufficientData(format!("need at least 2 frames, got {count}")));
    }

    let mut trajectory = Trajectory::default();
    let mut pairs = Vec::with_capacity(count - 1);
    let mut world = Pose::identity();
    let mut previous_relative = Pose::identity();

    let mut chain = |index: usize, outcome: PairOutcome, previous: &mut Pose, world: &mut Pose, traj: &mut Trajectory| -> Result<()> {
        let (result, timestamp) = outcome;
        let summary = match result {
            Ok(r) => {
                sink(index, &r);
                PairSummary {
                    index,
                    timestamp,
                    relative: r.pose,
                    fallback: false,
                    error: None,
                    iterations: r.iterations,
                    dynamic_fraction: r.dynamic_fraction(),
                    history: r.history,
                    gn_stats: r.gn_stats,
                }
            }
            Err(e) => {
                warn!("pair {} -> {index} failed ({e}); reusing the previous motion", index - 1);
                PairSummary {
                    index,
                    timestamp,
                    relative: *previous,
                    fallback: true,
                    error: Some(e.to_string()),
                    iterations: 0,
                    history: Vec::new(),
                    gn_stats: Vec::new(),
                    dynamic_fraction: 0.0,
                }
            }
        };
        *world = (*world * summary.relative.inverse()).renormalized();
        traj.push(timestamp, *world)?;
        *previous = summary.relative;
        pairs.push(summary);
        Ok(())
    };

    let first = load(0)?;
    trajectory.push(first.timestamp, Pose::identity())?;
    if opts.warm_start {
        let mut prev_frame = first;
        for i in 1..count {
            let frame = load(i)?;
            if frame.timestamp <= prev_frame.timestamp {
                return Err(Error::InvalidArgument(format!("timestamps must increase strictly at frame {i}")));
            }
            let result = process_pair(&prev_frame, &frame, k, &previous_relative, cfg);
            let ts = frame.timestamp;
            chain(i, (result, ts), &mut previous_relative, &mut world, &mut trajectory)?;
            prev_frame = frame;
        }
    } else {
        let outcomes: Vec<Result<PairOutcome>> = (1..count)
            .into_par_iter()
            .map(|i| {
                let a = load(i - 1)?;
                let b = load(i)?;
                if b.timestamp <= a.timestamp {
                    return Err(Error::InvalidArgument(format!("timestamps must increase strictly at frame {i}")));
                }
                Ok((process_pair(&a, &b, k, &Pose::identity(), cfg), b.timestamp))
            })
            .collect();
        for (i, outcome) in (1..count).zip(outcomes) {
            chain(i, outcome?, &mut previous_relative, &mut world, &mut trajectory)?;
        }
    }
    Ok(SequenceResult { trajectory, pairs })
}
