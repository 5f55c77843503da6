//! Joint photometric and depth direct alignment over SE(3).
//!
//! For every static pixel `x` of frame A with depth `d`, the point
//! `q = T · K⁻¹(x, d)` is projected into frame B and two residuals are formed:
//!
//! ```text
//! r_I = I_B(π(q)) − I_A(x)
//! r_D = D_B(π(q)) − q_z
//! ```
//!
//! The objective is `Σ (α·r_I + r_D)²`, minimised by Gauss–Newton with
//! left-multiplied updates `T ← exp(δ) · T`.

use log::{debug, trace};
use nalgebra::{Matrix6, Point2, Point3, SymmetricEigen, Vector6};
use rayon::prelude::*;

use crate::clustering::{Components, NO_COMPONENT};
use crate::error::{Error, Result};
use crate::geometry::{backproject, point_jacobian, se3_exp, Intrinsics, Pose, Twist};
use crate::imaging::{pyramid, Frame};
use crate::motion_mask::{MaskState, MotionMask};

/// Fewest valid residuals accepted at the finest level.
pub const MIN_VALID_RESIDUALS: usize = 200;

/// Largest normal-matrix condition number treated as well posed.
pub const MAX_CONDITION: f64 = 1e12;

/// Records accumulated per partial sum; fixed so reductions are reproducible.
const REDUCTION_CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentConfig {
    /// Scale of the photometric residual relative to the depth residual.
    pub alpha_i: f64,
    pub pyramid_levels: usize,
    pub max_gn_iters: usize,
    pub update_norm_tol: f64,
    /// Huber threshold in intensity units; the combined residual uses
    /// `alpha_i * huber_delta`.
    pub huber_delta: f64,
    /// Multiplier on the median absolute deviation in [`reject_outliers`].
    pub outlier_kappa: f64,
    /// Lower bound on the outlier threshold, in combined-residual units.
    pub outlier_floor: f64,
    /// A warped point lying this far (m) behind the observed B depth is
    /// occluded and skipped.
    pub occlusion_margin: f64,
    /// Depth-proportional part of the occlusion margin.
    pub occlusion_ratio: f64,
    /// Step halvings tried before a level gives up.
    pub max_step_halvings: usize,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            alpha_i: 10.0,
            pyramid_levels: 3,
            max_gn_iters: 20,
            update_norm_tol: 1e-6,
            huber_delta: 0.03,
            outlier_kappa: 5.0,
            outlier_floor: 0.2,
            occlusion_margin: 0.1,
            occlusion_ratio: 0.05,
            max_step_halvings: 5,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("alpha_i", self.alpha_i),
            ("update_norm_tol", self.update_norm_tol),
            ("huber_delta", self.huber_delta),
            ("outlier_kappa", self.outlier_kappa),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("outlier_floor", self.outlier_floor),
            ("occlusion_margin", self.occlusion_margin),
            ("occlusion_ratio", self.occlusion_ratio),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.pyramid_levels == 0 || self.max_gn_iters == 0 {
            return Err(Error::InvalidArgument(
                "pyramid_levels and max_gn_iters must be at least 1".into(),
            ));
        }
        Ok(())
    }

    fn huber_threshold(&self) -> f64 {
        self.alpha_i * self.huber_delta
    }
}

/// Residuals of one static pixel of frame A.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residual {
    pub x: u32,
    pub y: u32,
    pub r_i: f64,
    pub r_d: f64,
    /// False when the pixel warped out of frame, behind the camera, onto a
    /// depth hole, or behind a nearer surface of B.
    pub valid: bool,
}

/// Residuals of every static, depth-valid pixel of frame A.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSet {
    pub width: usize,
    pub height: usize,
    pub alpha_i: f64,
    pub records: Vec<Residual>,
    pub valid_count: usize,
    pub invalid_count: usize,
    /// `Σ (α·r_I + r_D)²` over valid records.
    pub objective: f64,
}

impl ResidualSet {
    fn from_records(width: usize, height: usize, alpha_i: f64, records: Vec<Residual>) -> Self {
        let valid_count = records.iter().filter(|r| r.valid).count();
        let objective = chunked_sum(&records, |r| if r.valid { (alpha_i * r.r_i + r.r_d).powi(2) } else { 0.0 });
        ResidualSet {
            width,
            height,
            alpha_i,
            invalid_count: records.len() - valid_count,
            valid_count,
            records,
            objective,
        }
    }

    #[inline]
    pub fn combined(&self, r: &Residual) -> f64 {
        self.alpha_i * r.r_i + r.r_d
    }

    /// Mean Huber cost per valid residual at threshold `k`.
    pub fn mean_huber(&self, k: f64) -> f64 {
        if self.valid_count == 0 {
            return f64::INFINITY;
        }
        let total = chunked_sum(&self.records, |r| if r.valid { huber(self.combined(r), k) } else { 0.0 });
        total / self.valid_count as f64
    }

    fn require_overlap(self) -> Result<Self> {
        if self.valid_count < MIN_VALID_RESIDUALS {
            return Err(Error::InsufficientOverlap {
                valid: self.valid_count,
                required: MIN_VALID_RESIDUALS,
            });
        }
        Ok(self)
    }
}

/// Sum over fixed-size chunks merged in index order.
fn chunked_sum<T: Sync>(items: &[T], f: impl Fn(&T) -> f64 + Sync) -> f64 {
    items
        .par_chunks(REDUCTION_CHUNK)
        .map(|c| c.iter().map(&f).sum::<f64>())
        .collect::<Vec<_>>()
        .into_iter()
        .sum()
}

#[inline]
pub fn huber(e: f64, k: f64) -> f64 {
    let a = e.abs();
    if a <= k {
        0.5 * e * e
    } else {
        k * (a - 0.5 * k)
    }
}

#[inline]
fn huber_weight(e: f64, k: f64) -> f64 {
    let a = e.abs();
    if a <= k {
        1.0
    } else {
        k / a
    }
}

/// Residuals and the Jacobian rows of `α·r_I + r_D` (zero rows for invalid
/// records).
#[derive(Debug, Clone)]
pub struct Linearization {
    pub residuals: ResidualSet,
    pub jacobians: Vec<[f64; 6]>,
}

impl Linearization {
    /// Gradient of the objective, `2 Σ e J`.
    pub fn objective_gradient(&self) -> Vector6<f64> {
        let rs = &self.residuals;
        let mut g = Vector6::zeros();
        for (r, j) in rs.records.iter().zip(&self.jacobians) {
            if r.valid {
                g += Vector6::from_column_slice(j) * (2.0 * rs.combined(r));
            }
        }
        g
    }
}

struct Eval {
    r_i: f64,
    r_d: f64,
    jac: [f64; 6],
}

fn check_inputs(a: &Frame, b: &Frame, mask: &MotionMask, k: &Intrinsics) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::InvalidArgument("frame dimensions differ".into()));
    }
    if mask.width() != a.width() || mask.height() != a.height() {
        return Err(Error::InvalidArgument("mask dimensions do not match the frames".into()));
    }
    if k.width != a.width() || k.height != a.height() {
        return Err(Error::InvalidArgument(format!(
            "intrinsics are {}x{} but frames are {}x{}",
            k.width,
            k.height,
            a.width(),
            a.height()
        )));
    }
    Ok(())
}

/// Warps one pixel and evaluates its residuals, optionally with the Jacobian.
#[inline]
fn eval_pixel(
    a: &Frame,
    b: &Frame,
    k: &Intrinsics,
    pose: &Pose,
    (x, y): (usize, usize),
    cfg: &AlignmentConfig,
    with_jacobian: bool,
) -> Option<Eval> {
    let d = a.depth.get(x, y);
    let p = backproject(k, &Point2::new(x as f64, y as f64), d).ok()?;
    let q: Point3<f64> = pose.transform(&p);
    if q.z <= 0.0 {
        return None;
    }
    let inv_z = 1.0 / q.z;
    let u = k.fx * q.x * inv_z + k.cx;
    let v = k.fy * q.y * inv_z + k.cy;
    let ib = b.intensity.sample_with_gradient(u, v)?;
    let db = b.depth.sample_with_gradient(u, v)?;
    if db.value < q.z - cfg.occlusion_margin.max(cfg.occlusion_ratio * q.z) {
        return None;
    }
    let r_i = ib.value - a.intensity.get(x, y);
    let r_d = db.value - q.z;
    let mut jac = [0.0; 6];
    if with_jacobian {
        let alpha = cfg.alpha_i;
        // d(α·I_B + D_B)/d(u, v), then through the projection.
        let gu = alpha * ib.du + db.du;
        let gv = alpha * ib.dv + db.dv;
        let ex = gu * k.fx * inv_z;
        let ey = gv * k.fy * inv_z;
        let ez = -(ex * q.x + ey * q.y) * inv_z;
        let jq = point_jacobian(&q);
        for (c, out) in jac.iter_mut().enumerate() {
            // −∂q_z/∂δ accounts for the predicted depth in r_D.
            *out = ex * jq[(0, c)] + ey * jq[(1, c)] + (ez - 1.0) * jq[(2, c)];
        }
    }
    Some(Eval { r_i, r_d, jac })
}

fn evaluate(
    a: &Frame,
    b: &Frame,
    pose: &Pose,
    mask: &MotionMask,
    k: &Intrinsics,
    cfg: &AlignmentConfig,
    with_jacobian: bool,
) -> (Vec<Residual>, Vec<[f64; 6]>) {
    let w = a.width();
    let rows: Vec<Vec<(Residual, [f64; 6])>> = (0..a.height())
        .into_par_iter()
        .map(|y| {
            let mut row = Vec::new();
            for x in 0..w {
                if mask.get(x, y) != MaskState::Static || a.depth.get(x, y) <= 0.0 {
                    continue;
                }
                let (r_i, r_d, valid, jac) = match eval_pixel(a, b, k, pose, (x, y), cfg, with_jacobian) {
                    Some(e) => (e.r_i, e.r_d, true, e.jac),
                    None => (0.0, 0.0, false, [0.0; 6]),
                };
                row.push((
                    Residual {
                        x: x as u32,
                        y: y as u32,
                        r_i,
                        r_d,
                        valid,
                    },
                    jac,
                ));
            }
            row
        })
        .collect();
    let n = rows.iter().map(Vec::len).sum();
    let mut records = Vec::with_capacity(n);
    let mut jacobians = Vec::with_capacity(if with_jacobian { n } else { 0 });
    for (r, j) in rows.into_iter().flatten() {
        records.push(r);
        if with_jacobian {
            jacobians.push(j);
        }
    }
    (records, jacobians)
}

/// Residuals of every static pixel of A with valid depth under `pose`
/// (which maps A coordinates to B coordinates).
pub fn residuals(
    frame_a: &Frame,
    frame_b: &Frame,
    pose: &Pose,
    mask: &MotionMask,
    k: &Intrinsics,
    cfg: &AlignmentConfig,
) -> Result<ResidualSet> {
    check_inputs(frame_a, frame_b, mask, k)?;
    let (records, _) = evaluate(frame_a, frame_b, pose, mask, k, cfg, false);
    ResidualSet::from_records(frame_a.width(), frame_a.height(), cfg.alpha_i, records).require_overlap()
}

/// [`residuals`] together with the analytic Jacobian of each combined
/// residual with respect to a left-multiplied twist.
pub fn linearize(
    frame_a: &Frame,
    frame_b: &Frame,
    pose: &Pose,
    mask: &MotionMask,
    k: &Intrinsics,
    cfg: &AlignmentConfig,
) -> Result<Linearization> {
    check_inputs(frame_a, frame_b, mask, k)?;
    let (records, jacobians) = evaluate(frame_a, frame_b, pose, mask, k, cfg, true);
    let residuals =
        ResidualSet::from_records(frame_a.width(), frame_a.height(), cfg.alpha_i, records).require_overlap()?;
    Ok(Linearization { residuals, jacobians })
}

/// One Gauss–Newton iteration, as exported to the pipeline log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationStats {
    /// Pyramid level, 0 = full resolution.
    pub level: usize,
    pub iter: usize,
    /// Objective after the iteration.
    pub objective: f64,
    pub step_norm: f64,
    pub valid_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    /// Maps frame-A coordinates to frame-B coordinates.
    pub pose: Pose,
    /// Full-resolution residuals at `pose`.
    pub residuals: ResidualSet,
    pub stats: Vec<IterationStats>,
}

/// Solves the weighted normal equations for the update `δ`.
fn solve_step(lin: &Linearization, k_huber: f64) -> Result<Vector6<f64>> {
    let rs = &lin.residuals;
    let parts: Vec<(Matrix6<f64>, Vector6<f64>)> = rs
        .records
        .par_chunks(REDUCTION_CHUNK)
        .zip(lin.jacobians.par_chunks(REDUCTION_CHUNK))
        .map(|(recs, jacs)| {
            let mut h = Matrix6::zeros();
            let mut g = Vector6::zeros();
            for (r, j) in recs.iter().zip(jacs) {
                if !r.valid {
                    continue;
                }
                let e = rs.combined(r);
                let w = huber_weight(e, k_huber);
                let j = Vector6::from_column_slice(j);
                h += (w * j) * j.transpose();
                g += j * (w * e);
            }
            (h, g)
        })
        .collect();
    let (h, g) = parts
        .into_iter()
        .fold((Matrix6::zeros(), Vector6::zeros()), |(h, g), (ph, pg)| (h + ph, g + pg));
    let eig = SymmetricEigen::new(h);
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &l| (lo.min(l), hi.max(l.abs())));
    let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(cond <= MAX_CONDITION) {
        return Err(Error::DegenerateGeometry(cond));
    }
    let step = h.cholesky().ok_or(Error::DegenerateGeometry(cond))?.solve(&(-g));
    Ok(step)
}

/// Gauss–Newton at one pyramid level. Returns the last accepted pose.
fn align_level(
    level: usize,
    a: &Frame,
    b: &Frame,
    mut pose: Pose,
    mask: &MotionMask,
    k: &Intrinsics,
    cfg: &AlignmentConfig,
    stats: &mut Vec<IterationStats>,
) -> Result<Pose> {
    let k_huber = cfg.huber_threshold();
    let mut lin = linearize(a, b, &pose, mask, k, cfg)?;
    let mut cost = lin.residuals.mean_huber(k_huber);
    for iter in 0..cfg.max_gn_iters {
        let step = solve_step(&lin, k_huber)?;
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=cfg.max_step_halvings {
            let delta = step * scale;
            let candidate = (se3_exp(&Twist(delta))? * pose).renormalized();
            if let Ok(next) = linearize(a, b, &candidate, mask, k, cfg) {
                let next_cost = next.residuals.mean_huber(k_huber);
                if next_cost <= cost {
                    accepted = Some((candidate, next, next_cost, delta.norm()));
                    break;
                }
            }
            scale *= 0.5;
        }
        let Some((candidate, next, next_cost, step_norm)) = accepted else {
            trace!("level {level} iter {iter}: no descent step, stopping");
            break;
        };
        debug_assert!(next_cost <= cost);
        pose = candidate;
        lin = next;
        cost = next_cost;
        stats.push(IterationStats {
            level,
            iter,
            objective: lin.residuals.objective,
            step_norm,
            valid_count: lin.residuals.valid_count,
        });
        trace!(
            "level {level} iter {iter}: objective {:.6e} |delta| {step_norm:.3e} valid {}",
            lin.residuals.objective,
            lin.residuals.valid_count
        );
        if step_norm < cfg.update_norm_tol {
            break;
        }
    }
    Ok(pose)
}

/// Coarse-to-fine Gauss–Newton alignment of frame A onto frame B.
///
/// Coarse levels without enough overlap are skipped; the finest level
/// propagates every error.
pub fn gauss_newton_align(
    frame_a: &Frame,
    frame_b: &Frame,
    init: &Pose,
    mask: &MotionMask,
    k: &Intrinsics,
    cfg: &AlignmentConfig,
) -> Result<Alignment> {
    cfg.validate()?;
    check_inputs(frame_a, frame_b, mask, k)?;
    let levels = cfg.pyramid_levels;
    let pa = pyramid(frame_a, levels);
    let pb = pyramid(frame_b, levels);
    let mut masks = vec![mask.clone()];
    let mut ks = vec![*k];
    for l in 1..levels {
        masks.push(masks[l - 1].downsampled());
        ks.push(ks[l - 1].downsampled());
    }
    let mut pose = *init;
    let mut stats = Vec::new();
    for level in (0..levels).rev() {
        match align_level(level, &pa[level], &pb[level], pose, &masks[level], &ks[level], cfg, &mut stats) {
            Ok(p) => pose = p,
            Err(e @ (Error::InsufficientOverlap { .. } | Error::DegenerateGeometry(_))) if level > 0 => {
                debug!("skipping pyramid level {level}: {e}");
            }
            Err(e) => return Err(e),
        }
    }
    let residuals = residuals(frame_a, frame_b, &pose, mask, k, cfg)?;
    Ok(Alignment { pose, residuals, stats })
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_unstable_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Robust outlier threshold on `|α·r_I + r_D|`: median plus `outlier_kappa`
/// median absolute deviations, never below `outlier_floor`.
pub fn outlier_threshold(rset: &ResidualSet, cfg: &AlignmentConfig) -> f64 {
    let mut mags: Vec<f64> = rset.records.iter().filter(|r| r.valid).map(|r| rset.combined(r).abs()).collect();
    let med = median(&mut mags);
    let mut dev: Vec<f64> = mags.iter().map(|m| (m - med).abs()).collect();
    let mad = median(&mut dev);
    (med + cfg.outlier_kappa * mad).max(cfg.outlier_floor)
}

/// Flips static pixels with outlying residuals to dynamic, then flips every
/// depth-cluster component of A whose members are mostly dynamic.
pub fn reject_outliers(
    rset: &ResidualSet,
    mask: &MotionMask,
    components: &Components,
    cfg: &AlignmentConfig,
) -> Result<MotionMask> {
    if mask.width() != rset.width
        || mask.height() != rset.height
        || components.width() != rset.width
        || components.height() != rset.height
    {
        return Err(Error::InvalidArgument("mask, components and residuals differ in size".into()));
    }
    let threshold = outlier_threshold(rset, cfg);
    let w = rset.width;
    let mut out = mask.clone();
    for r in rset.records.iter().filter(|r| r.valid) {
        if rset.combined(r).abs() > threshold {
            out.mark_dynamic(r.y as usize * w + r.x as usize);
        }
    }
    let mut dynamic = vec![0usize; components.len()];
    for (i, &id) in components.ids().iter().enumerate() {
        if id != NO_COMPONENT && out.states()[i] == MaskState::Dynamic {
            dynamic[id as usize] += 1;
        }
    }
    let majority: Vec<bool> = components
        .components()
        .iter()
        .zip(&dynamic)
        .map(|(c, &d)| 2 * d > c.pixel_count)
        .collect();
    for (i, &id) in components.ids().iter().enumerate() {
        if id != NO_COMPONENT && majority[id as usize] {
            out.mark_dynamic(i);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::{connected_components, kmeans_depth};
    use crate::geometry::se3_log;
    use crate::imaging::{DepthImage, Image, IntensityImage};
    use crate::synth::{presets, render_sequence};
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plane_pair(relative: &Pose) -> (Frame, Frame, Intrinsics) {
        let spec = presets::textured_plane_pair(relative);
        let seq = render_sequence(&spec, 0).unwrap();
        let k = spec.intrinsics;
        let mut frames = seq.frames.into_iter();
        (frames.next().unwrap(), frames.next().unwrap(), k)
    }

    fn gt_motion() -> Pose {
        let axis = Vector3::new(0.3, -0.5, 0.8).normalize();
        let omega = axis * 1f64.to_radians();
        let t = Vector3::new(0.012, -0.01, 0.012).normalize() * 0.02;
        Pose::from_quaternion(&nalgebra::UnitQuaternion::from_scaled_axis(omega), t)
    }

    fn full_mask(f: &Frame) -> MotionMask {
        MotionMask::from_depth(&f.depth)
    }

    fn pose_error(a: &Pose, b: &Pose) -> (f64, f64) {
        let e = &a.inverse() * b;
        (e.translation().norm(), e.rotation_angle().to_degrees())
    }

    #[test]
    fn identical_frames_give_zero_residuals() {
        let (a, _, k) = plane_pair(&gt_motion());
        let cfg = AlignmentConfig::default();
        let rs = residuals(&a, &a, &Pose::identity(), &full_mask(&a), &k, &cfg).unwrap();
        // Only the round trip through the pinhole model remains.
        assert!(rs.objective < 1e-20, "{}", rs.objective);
        assert!(rs.records.iter().filter(|r| r.valid).all(|r| r.r_i.abs() < 1e-12 && r.r_d.abs() < 1e-12));
        assert!(rs.valid_count > 70_000);
    }

    #[test]
    fn ground_truth_is_a_strict_local_minimum() {
        let gt = gt_motion();
        let (a, b, k) = plane_pair(&gt);
        let cfg = AlignmentConfig::default();
        let mask = full_mask(&a);
        let at_gt = residuals(&a, &b, &gt, &mask, &k, &cfg).unwrap();
        for dir in [Vector3::x(), Vector3::y(), Vector3::z()] {
            let moved = Pose::from_translation(dir * 0.01) * gt;
            let off = residuals(&a, &b, &moved, &mask, &k, &cfg).unwrap();
            assert!(off.objective > at_gt.objective);
        }
    }

    /// Integer pixel shifts of a fronto-parallel plane leave no
    /// interpolation error at all.
    #[test]
    fn exact_shift_has_vanishing_objective() {
        let k = presets::qvga();
        let z = 2.0;
        let shift = Pose::from_translation(Vector3::new(4.0 * z / k.fx, 0.0, 0.0));
        let spec = crate::synth::SceneSpec {
            intrinsics: k,
            camera: vec![Pose::identity(), shift.inverse()],
            planes: vec![crate::synth::Plane::facing(z, crate::synth::DEFAULT_TEXTURE)],
            boxes: vec![],
            depth_noise: 0.0,
            frame_interval: 0.1,
        };
        let seq = render_sequence(&spec, 0).unwrap();
        let (a, b) = (&seq.frames[0], &seq.frames[1]);
        let rs = residuals(a, b, &shift, &full_mask(a), &k, &AlignmentConfig::default()).unwrap();
        assert!(rs.objective < 1e-6, "{}", rs.objective);
    }

    #[test]
    fn identity_alignment_converges_in_one_iteration() {
        let (a, _, k) = plane_pair(&gt_motion());
        let al = gauss_newton_align(&a, &a, &Pose::identity(), &full_mask(&a), &k, &AlignmentConfig::default()).unwrap();
        let (dt, dr) = pose_error(&al.pose, &Pose::identity());
        assert!(dt < 1e-10 && dr.to_radians() < 1e-10);
        assert_eq!(al.stats.iter().filter(|s| s.level == 0).count(), 1);
        assert!(al.stats.iter().all(|s| s.iter == 0));
    }

    #[test]
    fn recovers_ground_truth_motion() {
        let gt = gt_motion();
        let (a, b, k) = plane_pair(&gt);
        let al = gauss_newton_align(&a, &b, &Pose::identity(), &full_mask(&a), &k, &AlignmentConfig::default()).unwrap();
        let (dt, dr) = pose_error(&al.pose, &gt);
        assert!(dt < 1e-3, "translation error {dt}");
        assert!(dr < 0.05, "rotation error {dr} deg");
    }

    /// Central differences of the objective restricted to the pixels valid
    /// at every probe.
    fn fd_gradient(a: &Frame, b: &Frame, pose: &Pose, mask: &MotionMask, k: &Intrinsics, cfg: &AlignmentConfig, h: f64) -> (Vector6<f64>, Vector6<f64>) {
        let lin = linearize(a, b, pose, mask, k, cfg).unwrap();
        let mut probes = Vec::new();
        for c in 0..6 {
            for s in [1.0, -1.0] {
                let mut d = Vector6::zeros();
                d[c] = s * h;
                probes.push(residuals(a, b, &(&se3_exp(&Twist(d)).unwrap() * pose), mask, k, cfg).unwrap());
            }
        }
        let keep: Vec<bool> = (0..lin.residuals.records.len())
            .map(|i| lin.residuals.records[i].valid && probes.iter().all(|p| p.records[i].valid))
            .collect();
        let objective = |rs: &ResidualSet| -> f64 {
            rs.records.iter().zip(&keep).filter(|(_, &k)| k).map(|(r, _)| rs.combined(r).powi(2)).sum()
        };
        let mut fd = Vector6::zeros();
        for c in 0..6 {
            fd[c] = (objective(&probes[2 * c]) - objective(&probes[2 * c + 1])) / (2.0 * h);
        }
        let mut analytic = Vector6::zeros();
        for ((r, j), &kept) in lin.residuals.records.iter().zip(&lin.jacobians).zip(&keep) {
            if kept {
                analytic += Vector6::from_column_slice(j) * (2.0 * lin.residuals.combined(r));
            }
        }
        (analytic, fd)
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let (a, b, k) = plane_pair(&gt_motion());
        let cfg = AlignmentConfig::default();
        let mask = full_mask(&a);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let v: [f64; 6] = std::array::from_fn(|i| rng.random_range(-1.0..1.0) * if i < 3 { 0.03 } else { 0.02 });
            let pose = se3_exp(&Twist(Vector6::from_column_slice(&v))).unwrap();
            let (an, fd) = fd_gradient(&a, &b, &pose, &mask, &k, &cfg, 1e-6);
            worst = worst.max((an - fd).norm() / an.norm());
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn masked_garbage_does_not_change_the_estimate() {
        let gt = gt_motion();
        let (a, b, k) = plane_pair(&gt);
        let cfg = AlignmentConfig::default();
        let clean = gauss_newton_align(&a, &b, &Pose::identity(), &full_mask(&a), &k, &cfg).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut intensity = (*a.intensity).clone();
        let mut depth = (*a.depth).clone();
        let mut states = full_mask(&a).states().to_vec();
        for y in 60..140 {
            for x in 100..200 {
                intensity.set(x, y, rng.random());
                depth.set(x, y, rng.random_range(0.3..5.0));
                states[y * a.width() + x] = MaskState::Dynamic;
            }
        }
        let dirty = Frame::new(a.timestamp, IntensityImage::new(intensity).unwrap(), DepthImage::new(depth).unwrap()).unwrap();
        let mask = MotionMask::from_states(a.width(), a.height(), states).unwrap();
        let clean_masked = gauss_newton_align(&a, &b, &Pose::identity(), &mask, &k, &cfg).unwrap();
        let dirty_masked = gauss_newton_align(&dirty, &b, &Pose::identity(), &mask, &k, &cfg).unwrap();
        let (dt, dr) = pose_error(&clean_masked.pose, &dirty_masked.pose);
        assert!(dt < 1e-6 && dr.to_radians() < 1e-6, "{dt} {dr}");
        let (dt, _) = pose_error(&clean.pose, &gt);
        assert!(dt < 1e-3);
    }

    #[test]
    fn alpha_scaling_keeps_the_minimiser_without_depth_residuals() {
        // Fronto-parallel plane moved sideways by whole pixels: depth is
        // unchanged and the true pose zeroes both terms exactly, so it is the
        // minimiser for any weighting.
        let k = presets::qvga();
        let z = 2.0;
        let motion = Pose::from_translation(Vector3::new(4.0 * z / k.fx, -3.0 * z / k.fy, 0.0));
        let spec = crate::synth::SceneSpec {
            intrinsics: k,
            camera: vec![Pose::identity(), motion.inverse()],
            planes: vec![crate::synth::Plane::facing(z, crate::synth::DEFAULT_TEXTURE)],
            boxes: vec![],
            depth_noise: 0.0,
            frame_interval: 0.1,
        };
        let seq = render_sequence(&spec, 0).unwrap();
        let (a, b) = (&seq.frames[0], &seq.frames[1]);
        let mask = full_mask(a);
        let mut cfg = AlignmentConfig::default();
        let p1 = gauss_newton_align(a, b, &Pose::identity(), &mask, &k, &cfg).unwrap().pose;
        cfg.alpha_i *= 2.0;
        let p2 = gauss_newton_align(a, b, &Pose::identity(), &mask, &k, &cfg).unwrap().pose;
        let (dt, dr) = pose_error(&p1, &p2);
        assert!(dt < 1e-6 && dr.to_radians() < 1e-6, "{dt} {dr}");
        assert!(se3_log(&(motion.inverse() * p1)).norm() < 1e-6);
    }

    #[test]
    fn too_little_overlap_is_reported() {
        let (a, b, k) = plane_pair(&gt_motion());
        let far = Pose::from_translation(Vector3::new(5.0, 0.0, 0.0));
        let err = residuals(&a, &b, &far, &full_mask(&a), &k, &AlignmentConfig::default()).unwrap_err();
        assert!(matches!(err, Error::InsufficientOverlap { valid: 0, required: 200 }));
    }

    fn toy_residuals(w: usize, h: usize, f: impl Fn(usize, usize) -> f64) -> ResidualSet {
        let records = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .map(|(x, y)| Residual {
                x: x as u32,
                y: y as u32,
                r_i: 0.0,
                r_d: f(x, y),
                valid: true,
            })
            .collect();
        ResidualSet::from_records(w, h, 10.0, records)
    }

    fn two_level_components(w: usize, h: usize, near: impl Fn(usize, usize) -> bool) -> Components {
        let depth = DepthImage::new(Image::from_fn(w, h, |x, y| if near(x, y) { 1.0 } else { 3.0 })).unwrap();
        connected_components(&kmeans_depth(&depth, 2).unwrap())
    }

    #[test]
    fn zero_residuals_leave_the_mask_alone() {
        let rs = toy_residuals(40, 30, |_, _| 0.0);
        let mask = MotionMask::from_states(40, 30, vec![MaskState::Static; 1200]).unwrap();
        let comps = two_level_components(40, 30, |x, _| x < 20);
        let out = reject_outliers(&rs, &mask, &comps, &AlignmentConfig::default()).unwrap();
        assert_eq!(out, mask);
    }

    #[test]
    fn outlying_block_and_its_component_flip() {
        let (w, h) = (60, 40);
        // Object occupies x in 10..30, y in 10..30; the outlying residuals
        // cover 16x16 of its 20x20 pixels, a clear majority.
        let comps = two_level_components(w, h, |x, y| (10..30).contains(&x) && (10..30).contains(&y));
        let in_block = |x: usize, y: usize| (12..28).contains(&x) && (12..28).contains(&y);
        let rs = toy_residuals(w, h, |x, y| if in_block(x, y) { 1.0 } else { 0.0 });
        let mask = MotionMask::from_states(w, h, vec![MaskState::Static; w * h]).unwrap();
        let out = reject_outliers(&rs, &mask, &comps, &AlignmentConfig::default()).unwrap();
        for y in 0..h {
            for x in 0..w {
                let object = (10..30).contains(&x) && (10..30).contains(&y);
                assert_eq!(out.get(x, y) == MaskState::Dynamic, object, "({x},{y})");
            }
        }
        // Nothing flips back on a second pass with clean residuals.
        let clean = toy_residuals(w, h, |_, _| 0.0);
        let again = reject_outliers(&clean, &out, &comps, &AlignmentConfig::default()).unwrap();
        assert_eq!(again, out);
    }

    #[test]
    fn alignment_is_bit_reproducible() {
        let gt = gt_motion();
        let (a, b, k) = plane_pair(&gt);
        let cfg = AlignmentConfig::default();
        let r1 = gauss_newton_align(&a, &b, &Pose::identity(), &full_mask(&a), &k, &cfg).unwrap();
        let r2 = gauss_newton_align(&a, &b, &Pose::identity(), &full_mask(&a), &k, &cfg).unwrap();
        assert_eq!(r1, r2);
    }
}
