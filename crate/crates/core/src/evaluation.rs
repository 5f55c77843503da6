//! Relative pose error and absolute trajectory error.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Point3, Vector3};

use crate::dataset_io::{associate, Trajectory, DEFAULT_MAX_DT};
use crate::error::{Error, Result};
use crate::geometry::{nearest_rotation, Pose};

/// Error of one evaluated pose or pose pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorSample {
    /// Timestamp of the (first) estimated pose.
    pub timestamp: f64,
    /// Metres, or metres per second for per-second RPE.
    pub trans: f64,
    /// Degrees, or degrees per second for per-second RPE. ATE is purely
    /// translational and leaves this empty.
    pub rot: Option<f64>,
}

/// Summary statistics over [`ErrorSample`]s.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub count: usize,
    pub trans_rmse: f64,
    pub trans_mean: f64,
    pub trans_median: f64,
    pub trans_max: f64,
    pub trans_min: f64,
    /// Rotational statistics, present when every sample has a rotation.
    pub rot_rmse: Option<f64>,
    pub rot_mean: Option<f64>,
    pub rot_max: Option<f64>,
    pub samples: Vec<ErrorSample>,
}

fn rmse(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_unstable_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

impl MetricReport {
    /// Statistics of a non-empty sample list.
    pub fn from_samples(samples: Vec<ErrorSample>) -> Self {
        assert!(!samples.is_empty(), "a report needs samples");
        let t: Vec<f64> = samples.iter().map(|s| s.trans).collect();
        let r: Option<Vec<f64>> = samples.iter().map(|s| s.rot).collect();
        MetricReport {
            count: samples.len(),
            trans_rmse: rmse(&t),
            trans_mean: mean(&t),
            trans_median: median(&t),
            trans_max: t.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            trans_min: t.iter().copied().fold(f64::INFINITY, f64::min),
            rot_rmse: r.as_deref().map(rmse),
            rot_mean: r.as_deref().map(mean),
            rot_max: r.as_deref().map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
            samples,
        }
    }
}

/// How far apart the two poses of an RPE pair are.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RpeDelta {
    /// Time offset in seconds; errors are divided by it (m/s, deg/s).
    Seconds(f64),
    /// Offset in estimated frames; errors are per pair (m, deg).
    Frames(usize),
}

/// Default RPE spacing: one second.
pub const DEFAULT_RPE_DELTA: RpeDelta = RpeDelta::Seconds(1.0);

fn nearest_within(traj: &Trajectory, t: f64, max_dt: f64) -> Option<&Pose> {
    traj.nearest(t, max_dt).map(|i| &traj.entries()[i].1)
}

/// Relative pose error `E = (Q_t⁻¹ Q_{t+Δ})⁻¹ (P_t⁻¹ P_{t+Δ})` with ground
/// truth `Q` and estimate `P`.
pub fn relative_pose_error(gt: &Trajectory, est: &Trajectory, delta: RpeDelta) -> Result<MetricReport> {
    let max_dt = DEFAULT_MAX_DT;
    let entries = est.entries();
    let mut samples = Vec::new();
    for (i, (t0, p0)) in entries.iter().enumerate() {
        let (p1, t1, scale) = match delta {
            RpeDelta::Seconds(d) => {
                if !(d > 0.0) {
                    return Err(Error::InvalidArgument(format!("RPE delta must be positive, got {d}")));
                }
                match est.nearest(t0 + d, max_dt) {
                    Some(j) if j != i => (&entries[j].1, entries[j].0, d),
                    _ => continue,
                }
            }
            RpeDelta::Frames(n) => {
                if n == 0 {
                    return Err(Error::InvalidArgument("RPE frame delta must be at least 1".into()));
                }
                match entries.get(i + n) {
                    Some((t1, p1)) => (p1, *t1, 1.0),
                    None => continue,
                }
            }
        };
        let (Some(q0), Some(q1)) = (nearest_within(gt, *t0, max_dt), nearest_within(gt, t1, max_dt)) else {
            continue;
        };
        let gt_rel = &q0.inverse() * q1;
        let est_rel = &p0.inverse() * p1;
        // Equal motions are error-free; skip the rounding of E = I.
        let (trans, rot) = if gt_rel == est_rel {
            (0.0, 0.0)
        } else {
            let e = gt_rel.inverse() * est_rel;
            (e.translation().norm(), e.rotation_angle().to_degrees())
        };
        samples.push(ErrorSample {
            timestamp: *t0,
            trans: trans / scale,
            rot: Some(rot / scale),
        });
    }
    if samples.is_empty() {
        return Err(Error::EmptyAssociation(
            "no estimated pose pairs with ground truth at both ends".into(),
        ));
    }
    Ok(MetricReport::from_samples(samples))
}

/// Least-squares rigid transform `g` minimising `Σ ‖a_i − g·b_i‖²`.
///
/// For degenerate inputs the sign of the weakest singular direction is
/// chosen so that the rotation has determinant +1.
pub fn rigid_alignment(a: &[Point3<f64>], b: &[Point3<f64>]) -> Pose {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ca = a.iter().fold(Vector3::zeros(), |s, p| s + p.coords) / n;
    let cb = b.iter().fold(Vector3::zeros(), |s, p| s + p.coords) / n;
    let mut h = Matrix3::zeros();
    for (pa, pb) in a.iter().zip(b) {
        h += (pb.coords - cb) * (pa.coords - ca).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    // Singular values come sorted in decreasing order; the last column is
    // the weakest direction.
    let d = (v_t.transpose() * u.transpose()).determinant().signum();
    let s = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, if d < 0.0 { -1.0 } else { 1.0 }));
    let r = nearest_rotation(&(v_t.transpose() * s * u.transpose()));
    let t = ca - r * cb;
    Pose::new(r, t).expect("orthonormal by construction")
}

/// ATE after optimal rigid alignment of the estimate onto ground truth.
/// Only positions are compared: the alignment is fitted to positions, and
/// for near-collinear paths it leaves the orientation about the path axis
/// undetermined.
pub fn absolute_trajectory_error(gt: &Trajectory, est: &Trajectory) -> Result<MetricReport> {
    let gt_t: Vec<f64> = gt.timestamps().collect();
    let est_t: Vec<f64> = est.timestamps().collect();
    let pairs = associate(&est_t, &gt_t, DEFAULT_MAX_DT);
    if pairs.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "ATE needs at least 3 associated poses, found {}",
            pairs.len()
        )));
    }
    let gt_p: Vec<Point3<f64>> = pairs.iter().map(|&(_, j)| Point3::from(*gt.entries()[j].1.translation())).collect();
    let est_p: Vec<Point3<f64>> = pairs.iter().map(|&(i, _)| Point3::from(*est.entries()[i].1.translation())).collect();
    // Identical positions are aligned exactly by the identity.
    let g = if gt_p == est_p { Pose::identity() } else { rigid_alignment(&gt_p, &est_p) };
    Ok(MetricReport::from_samples(ate_samples(gt, est, &pairs, &g)))
}

/// Per-pose errors of `est` aligned by `g` against `gt`.
fn ate_samples(gt: &Trajectory, est: &Trajectory, pairs: &[(usize, usize)], g: &Pose) -> Vec<ErrorSample> {
    pairs
        .iter()
        .map(|&(i, j)| {
            let (t, p) = &est.entries()[i];
            let q = &gt.entries()[j].1;
            let aligned = g * p;
            ErrorSample {
                timestamp: *t,
                trans: (q.translation() - aligned.translation()).norm(),
                rot: None,
            }
        })
        .collect()
}

/// ATE with a caller-chosen alignment instead of the optimal one.
pub fn absolute_trajectory_error_with(gt: &Trajectory, est: &Trajectory, g: &Pose) -> Result<MetricReport> {
    let gt_t: Vec<f64> = gt.timestamps().collect();
    let est_t: Vec<f64> = est.timestamps().collect();
    let pairs = associate(&est_t, &gt_t, DEFAULT_MAX_DT);
    if pairs.is_empty() {
        return Err(Error::EmptyAssociation("no estimated pose matches the ground truth".into()));
    }
    Ok(MetricReport::from_samples(ate_samples(gt, est, &pairs, g)))
}

pub const REPORT_HEADER: &str =
    "metric,count,trans_rmse,trans_mean,trans_median,trans_max,trans_min,rot_rmse,rot_mean,rot_max";

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

/// One CSV line (no header) summarising `report` under the label `metric`.
/// Absent rotational statistics are empty fields.
pub fn report_csv_row(metric: &str, report: &MetricReport) -> String {
    format!(
        "{metric},{},{},{},{},{},{},{},{},{}",
        report.count,
        report.trans_rmse,
        report.trans_mean,
        report.trans_median,
        report.trans_max,
        report.trans_min,
        opt(report.rot_rmse),
        opt(report.rot_mean),
        opt(report.rot_max)
    )
}

/// Per-sample error series for plotting.
pub fn series_csv(report: &MetricReport) -> String {
    let mut out = String::from("timestamp,trans_error,rot_error\n");
    for s in &report.samples {
        let _ = writeln!(out, "{},{},{}", s.timestamp, s.trans, opt(s.rot));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{se3_exp, Twist};
    use nalgebra::Vector6;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_pose(rng: &mut ChaCha8Rng, scale: f64) -> Pose {
        let v: [f64; 6] = std::array::from_fn(|_| rng.random_range(-scale..scale));
        se3_exp(&Twist(Vector6::from_column_slice(&v))).unwrap()
    }

    fn random_trajectory(n: usize, seed: u64) -> Trajectory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pose = Pose::identity();
        Trajectory::new(
            (0..n)
                .map(|i| {
                    pose = pose * random_pose(&mut rng, 0.05);
                    (i as f64 / 30.0, pose)
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_trajectories_score_zero() {
        let gt = random_trajectory(100, 1);
        let rpe = relative_pose_error(&gt, &gt, DEFAULT_RPE_DELTA).unwrap();
        let ate = absolute_trajectory_error(&gt, &gt).unwrap();
        assert_eq!(rpe.trans_rmse, 0.0);
        assert_eq!(rpe.rot_rmse, Some(0.0));
        assert_eq!(ate.rot_rmse, None);
        assert_eq!(ate.trans_rmse, 0.0);
        assert_eq!(rpe.count, 70);
    }

    #[test]
    fn rigidly_moved_copy() {
        let gt = random_trajectory(100, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_pose(&mut rng, 2.0);
        let est = gt.transformed(&g);
        let ate = absolute_trajectory_error(&gt, &est).unwrap();
        assert!(ate.trans_rmse < 1e-9, "{}", ate.trans_rmse);
        let rpe = relative_pose_error(&gt, &est, RpeDelta::Frames(1)).unwrap();
        assert!(rpe.trans_rmse < 1e-9 && rpe.rot_rmse.unwrap() < 1e-7);
    }

    #[test]
    fn constant_drift_is_one_centimetre_per_second() {
        // Stationary ground truth; the estimate drifts 0.01 m per second.
        let gt = Trajectory::new((0..3).map(|t| (t as f64, Pose::identity())).collect()).unwrap();
        let est = Trajectory::new(
            (0..3)
                .map(|t| (t as f64, Pose::from_translation(Vector3::new(0.01 * t as f64, 0.0, 0.0))))
                .collect(),
        )
        .unwrap();
        let rpe = relative_pose_error(&gt, &est, RpeDelta::Seconds(1.0)).unwrap();
        assert_eq!(rpe.count, 2);
        assert_eq!(rpe.trans_rmse, 0.01);
        assert_eq!(rpe.trans_max, 0.01);

        // With a rotating ground truth the same drift still measures 0.01.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt: Vec<(f64, Pose)> = (0..3).map(|t| (t as f64, random_pose(&mut rng, 0.5))).collect();
        let est: Vec<(f64, Pose)> = gt
            .iter()
            .map(|(t, q)| (*t, &Pose::from_translation(Vector3::new(0.01 * t, 0.0, 0.0)) * q))
            .collect();
        let rpe = relative_pose_error(&Trajectory::new(gt).unwrap(), &Trajectory::new(est).unwrap(), RpeDelta::Seconds(1.0))
            .unwrap();
        assert!((rpe.trans_rmse - 0.01).abs() < 1e-15, "{}", rpe.trans_rmse);
    }

    #[test]
    fn rpe_is_invariant_to_a_common_rigid_transform() {
        let gt = random_trajectory(60, 3);
        let est = random_trajectory(60, 4);
        let g = random_pose(&mut ChaCha8Rng::seed_from_u64(8), 1.0);
        let a = relative_pose_error(&gt, &est, RpeDelta::Frames(1)).unwrap();
        let b = relative_pose_error(&gt.transformed(&g), &est.transformed(&g), RpeDelta::Frames(1)).unwrap();
        assert!((a.trans_rmse - b.trans_rmse).abs() < 1e-12);
        assert!((a.rot_rmse.unwrap() - b.rot_rmse.unwrap()).abs() < 1e-9);
    }

    #[test]
    fn noisy_ate_matches_brute_force() {
        let gt = random_trajectory(1000, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let est = Trajectory::new(
            gt.entries()
                .iter()
                .map(|(t, p)| {
                    let n = Vector3::from_fn(|_, _| noise.sample(&mut rng));
                    (*t, Pose::new(*p.rotation(), p.translation() + n).unwrap())
                })
                .collect(),
        )
        .unwrap();
        let report = absolute_trajectory_error(&gt, &est).unwrap();
        let gt_p: Vec<Point3<f64>> = gt.entries().iter().map(|(_, p)| Point3::from(*p.translation())).collect();
        let est_p: Vec<Point3<f64>> = est.entries().iter().map(|(_, p)| Point3::from(*p.translation())).collect();
        let g = rigid_alignment(&gt_p, &est_p);
        let mut sq = 0.0;
        for (a, b) in gt_p.iter().zip(&est_p) {
            sq += (a - g.transform(b)).norm_squared();
        }
        let brute = (sq / 1000.0).sqrt();
        assert!((report.trans_rmse - brute).abs() < 1e-12);
        // Empirical band: about sqrt(3) * 0.01.
        assert!((0.014..0.02).contains(&report.trans_rmse), "{}", report.trans_rmse);
    }

    #[test]
    fn optimal_alignment_beats_perturbations() {
        let gt = random_trajectory(50, 9);
        let est = random_trajectory(50, 10);
        let opt = absolute_trajectory_error(&gt, &est).unwrap();
        let identity = absolute_trajectory_error_with(&gt, &est, &Pose::identity()).unwrap();
        assert!(opt.trans_rmse <= identity.trans_rmse);
        let gt_p: Vec<Point3<f64>> = gt.entries().iter().map(|(_, p)| Point3::from(*p.translation())).collect();
        let est_p: Vec<Point3<f64>> = est.entries().iter().map(|(_, p)| Point3::from(*p.translation())).collect();
        let g = rigid_alignment(&gt_p, &est_p);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let h = random_pose(&mut rng, 0.05) * g;
            let r = absolute_trajectory_error_with(&gt, &est, &h).unwrap();
            assert!(opt.trans_rmse <= r.trans_rmse + 1e-15);
        }
    }

    #[test]
    fn degenerate_point_sets_still_align() {
        // Collinear points: the rotation about the line is unconstrained but
        // the result must still be a proper rotation.
        let a: Vec<Point3<f64>> = (0..5).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        let g = rigid_alignment(&a, &a);
        assert!((g.rotation().determinant() - 1.0).abs() < 1e-12);
        for p in &a {
            assert!((g.transform(p) - p).norm() < 1e-12);
        }
        let same = vec![Point3::new(1.0, 2.0, 3.0); 4];
        let g = rigid_alignment(&same, &same);
        assert!((g.rotation().determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_matches() {
        let gt = random_trajectory(2, 1);
        assert!(matches!(absolute_trajectory_error(&gt, &gt), Err(Error::InsufficientData(_))));
        let far = Trajectory::new(vec![(100.0, Pose::identity())]).unwrap();
        assert!(matches!(
            relative_pose_error(&gt, &far, DEFAULT_RPE_DELTA),
            Err(Error::EmptyAssociation(_))
        ));
    }

    #[test]
    fn any_difference_is_positive() {
        let gt = random_trajectory(30, 1);
        let mut entries = gt.entries().to_vec();
        entries[10].1 = Pose::from_translation(Vector3::new(2e-6, 0.0, 0.0)) * entries[10].1;
        let est = Trajectory::new(entries).unwrap();
        assert!(absolute_trajectory_error(&gt, &est).unwrap().trans_rmse > 0.0);
        assert!(relative_pose_error(&gt, &est, RpeDelta::Frames(1)).unwrap().trans_rmse > 0.0);
    }
}
