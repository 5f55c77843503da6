//! TUM RGB-D ingestion, trajectory files and PLY point-cloud export.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Point2, Point3, Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{backproject, Intrinsics, Pose};
use crate::imaging::{load_depth_png, load_intensity_png, Frame};
use crate::motion_mask::MotionMask;

/// Default rgb/depth association tolerance in seconds.
pub const DEFAULT_MAX_DT: f64 = 0.02;

/// Time-ordered camera poses (camera-to-world).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    entries: Vec<(f64, Pose)>,
}

impl Trajectory {
    pub fn new(entries: Vec<(f64, Pose)>) -> Result<Self> {
        let mut traj = Trajectory::default();
        for (t, pose) in entries {
            traj.push(t, pose)?;
        }
        Ok(traj)
    }

    pub fn push(&mut self, timestamp: f64, pose: Pose) -> Result<()> {
        if !timestamp.is_finite() {
            return Err(Error::InvalidArgument("non-finite timestamp".into()));
        }
        if let Some(&(last, _)) = self.entries.last() {
            if timestamp <= last {
                return Err(Error::InvalidArgument(format!(
                    "timestamps must increase strictly ({timestamp} after {last})"
                )));
            }
        }
        self.entries.push((timestamp, pose));
        Ok(())
    }

    pub fn entries(&self) -> &[(f64, Pose)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn timestamps(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|(t, _)| *t)
    }

    /// Index of the entry closest to `t`, if within `max_dt`.
    pub fn nearest(&self, t: f64, max_dt: f64) -> Option<usize> {
        let i = self.entries.partition_point(|(ts, _)| *ts < t);
        let mut best: Option<usize> = None;
        for j in [i.wrapping_sub(1), i] {
            if j < self.entries.len() {
                let d = (self.entries[j].0 - t).abs();
                if d <= max_dt && best.is_none_or(|b| d < (self.entries[b].0 - t).abs()) {
                    best = Some(j);
                }
            }
        }
        best
    }

    /// Same trajectory with every pose left-multiplied by `g`.
    pub fn transformed(&self, g: &Pose) -> Trajectory {
        Trajectory {
            entries: self.entries.iter().map(|(t, p)| (*t, g * p)).collect(),
        }
    }
}

/// One line of a trajectory file: `timestamp tx ty tz qx qy qz qw`.
pub fn format_pose_line(t: f64, pose: &Pose) -> String {
    let q = pose.quaternion();
    let q = if q.w < 0.0 { -q.into_inner() } else { q.into_inner() };
    let tr = pose.translation();
    format!(
        "{} {} {} {} {} {} {} {}",
        t, tr.x, tr.y, tr.z, q.i, q.j, q.k, q.w
    )
}

pub fn format_trajectory(traj: &Trajectory) -> String {
    let mut out = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for (t, pose) in traj.entries() {
        out.push_str(&format_pose_line(*t, pose));
        out.push('\n');
    }
    out
}

pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    fs::write(path, format_trajectory(traj)).map_err(|e| Error::io(path, e))
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trajectory(&text, path)
}

/// Parses trajectory text; `origin` only labels error messages.
pub fn parse_trajectory(text: &str, origin: &Path) -> Result<Trajectory> {
    let mut traj = Trajectory::default();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(str::parse::<f64>)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(origin, lineno, format!("bad number: {e}")))?;
        let [t, tx, ty, tz, qx, qy, qz, qw] = fields[..] else {
            return Err(Error::format(
                origin,
                lineno,
                format!("expected 8 fields, found {}", fields.len()),
            ));
        };
        if !fields.iter().all(|v| v.is_finite()) {
            return Err(Error::format(origin, lineno, "non-finite value"));
        }
        let q = Quaternion::new(qw, qx, qy, qz);
        let norm = q.norm();
        if (norm - 1.0).abs() > 1e-3 {
            return Err(Error::format(
                origin,
                lineno,
                format!("quaternion norm {norm} is not 1"),
            ));
        }
        let pose = Pose::from_quaternion(&UnitQuaternion::from_quaternion(q), Vector3::new(tx, ty, tz));
        traj.push(t, pose)
            .map_err(|e| Error::format(origin, lineno, e.to_string()))?;
    }
    Ok(traj)
}

/// Reads a TUM index file (`timestamp filename` per line, `#` comments).
pub fn read_index(path: &Path) -> Result<Vec<(f64, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(t), Some(name)) = (parts.next(), parts.next()) else {
            return Err(Error::format(path, i + 1, "expected `timestamp filename`"));
        };
        let t: f64 = t
            .parse()
            .map_err(|e| Error::format(path, i + 1, format!("bad timestamp: {e}")))?;
        out.push((t, name.to_string()));
    }
    Ok(out)
}

/// Greedy nearest-timestamp matching: candidate pairs within `max_dt` are
/// taken in order of increasing time difference, each entry at most once.
/// Returns `(index_a, index_b)` sorted by `index_a`.
pub fn associate(a: &[f64], b: &[f64], max_dt: f64) -> Vec<(usize, usize)> {
    let mut b_sorted: Vec<(f64, usize)> = b.iter().copied().zip(0..).collect();
    b_sorted.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (ia, &ta) in a.iter().enumerate() {
        let start = b_sorted.partition_point(|&(tb, _)| tb < ta - max_dt);
        for &(tb, ib) in b_sorted[start..].iter().take_while(|&&(tb, _)| tb <= ta + max_dt) {
            candidates.push(((ta - tb).abs(), ia, ib));
        }
    }
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut pairs = Vec::new();
    for (_, ia, ib) in candidates {
        if !used_a[ia] && !used_b[ib] {
            used_a[ia] = true;
            used_b[ib] = true;
            pairs.push((ia, ib));
        }
    }
    pairs.sort_unstable();
    pairs
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssociatedEntry {
    pub timestamp: f64,
    pub rgb: PathBuf,
    pub depth_timestamp: f64,
    pub depth: PathBuf,
}

/// An rgb/depth-associated TUM sequence.
#[derive(Debug, Clone)]
pub struct AssociatedSequence {
    pub root: PathBuf,
    pub entries: Vec<AssociatedEntry>,
    pub intrinsics: Intrinsics,
    pub groundtruth: Option<Trajectory>,
}

impl AssociatedSequence {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load_frame(&self, index: usize) -> Result<Frame> {
        let e = &self.entries[index];
        let intensity = load_intensity_png(&e.rgb)?;
        let depth = load_depth_png(&e.depth, self.intrinsics.depth_scale)?;
        if intensity.width() != self.intrinsics.width || intensity.height() != self.intrinsics.height {
            return Err(Error::InvalidArgument(format!(
                "{}: image is {}x{} but the intrinsics expect {}x{}",
                e.rgb.display(),
                intensity.width(),
                intensity.height(),
                self.intrinsics.width,
                self.intrinsics.height
            )));
        }
        Frame::new(e.timestamp, intensity, depth)
    }
}

/// Published calibrations of the three TUM cameras.
fn tum_camera_for(dir: &Path) -> Intrinsics {
    let name = dir.to_string_lossy().to_lowercase();
    let (fx, fy, cx, cy) = if name.contains("freiburg1") || name.contains("fr1") {
        (517.3, 516.5, 318.6, 255.3)
    } else if name.contains("freiburg2") || name.contains("fr2") {
        (520.9, 521.0, 325.1, 249.7)
    } else if name.contains("freiburg3") || name.contains("fr3") {
        (535.4, 539.2, 320.1, 247.6)
    } else {
        return Intrinsics::tum_default();
    };
    Intrinsics {
        fx,
        fy,
        cx,
        cy,
        ..Intrinsics::tum_default()
    }
}

/// File name of the optional calibration written next to the index files.
pub const INTRINSICS_FILE: &str = "intrinsics.txt";

pub fn format_intrinsics(k: &Intrinsics) -> String {
    format!(
        "fx = {}\nfy = {}\ncx = {}\ncy = {}\nwidth = {}\nheight = {}\ndepth_scale = {}\n",
        k.fx, k.fy, k.cx, k.cy, k.width, k.height, k.depth_scale
    )
}

pub fn read_intrinsics(path: &Path) -> Result<Intrinsics> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut k = Intrinsics::tum_default();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::format(path, i + 1, "expected `key = value`"));
        };
        let value = value.trim();
        let bad = |e: &dyn std::fmt::Display| Error::format(path, i + 1, format!("bad value: {e}"));
        let num = || value.parse::<f64>().map_err(|e| bad(&e));
        let int = || value.parse::<usize>().map_err(|e| bad(&e));
        match key.trim() {
            "fx" => k.fx = num()?,
            "fy" => k.fy = num()?,
            "cx" => k.cx = num()?,
            "cy" => k.cy = num()?,
            "width" => k.width = int()?,
            "height" => k.height = int()?,
            "depth_scale" => k.depth_scale = num()?,
            other => return Err(Error::format(path, i + 1, format!("unknown key `{other}`"))),
        }
    }
    k.validate()?;
    Ok(k)
}

/// Loads a TUM-layout directory.
///
/// Intrinsics come from `intrinsics.txt` when present, otherwise from the
/// published calibration matching `freiburg1/2/3` in the path.
pub fn load_tum(dir: &Path, max_dt: f64) -> Result<AssociatedSequence> {
    let calib = dir.join(INTRINSICS_FILE);
    let intrinsics = if calib.exists() {
        read_intrinsics(&calib)?
    } else {
        tum_camera_for(dir)
    };
    load_tum_with(dir, max_dt, intrinsics)
}

pub fn load_tum_with(dir: &Path, max_dt: f64, intrinsics: Intrinsics) -> Result<AssociatedSequence> {
    let rgb = read_index(&dir.join("rgb.txt"))?;
    let depth = read_index(&dir.join("depth.txt"))?;
    let rgb_t: Vec<f64> = rgb.iter().map(|(t, _)| *t).collect();
    let depth_t: Vec<f64> = depth.iter().map(|(t, _)| *t).collect();
    let pairs = associate(&rgb_t, &depth_t, max_dt);
    if pairs.is_empty() {
        return Err(Error::EmptyAssociation(format!(
            "no rgb/depth pairs within {max_dt} s in {}",
            dir.display()
        )));
    }
    let mut entries: Vec<AssociatedEntry> = pairs
        .into_iter()
        .map(|(i, j)| AssociatedEntry {
            timestamp: rgb[i].0,
            rgb: dir.join(&rgb[i].1),
            depth_timestamp: depth[j].0,
            depth: dir.join(&depth[j].1),
        })
        .collect();
    entries.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    entries.dedup_by(|b, a| b.timestamp == a.timestamp);

    let gt_path = dir.join("groundtruth.txt");
    let groundtruth = if gt_path.exists() {
        Some(read_trajectory(&gt_path)?)
    } else {
        None
    };
    Ok(AssociatedSequence {
        root: dir.to_path_buf(),
        entries,
        intrinsics,
        groundtruth,
    })
}

/// One exported point with its provenance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloudPoint {
    pub position: Point3<f64>,
    pub intensity: f64,
    pub frame: usize,
    pub pixel: (usize, usize),
}

/// Back-projects every static pixel with valid depth (every `stride`-th row
/// and column) into the world frame. `poses` are camera-to-world.
pub fn build_point_cloud(
    frames: &[Frame],
    poses: &[Pose],
    masks: &[MotionMask],
    k: &Intrinsics,
    stride: usize,
) -> Result<Vec<CloudPoint>> {
    if frames.len() != poses.len() || frames.len() != masks.len() {
        return Err(Error::InvalidArgument(format!(
            "{} frames, {} poses and {} masks",
            frames.len(),
            poses.len(),
            masks.len()
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be at least 1".into()));
    }
    let mut points = Vec::new();
    for (fi, ((frame, pose), mask)) in frames.iter().zip(poses).zip(masks).enumerate() {
        if mask.width() != frame.width() || mask.height() != frame.height() {
            return Err(Error::InvalidArgument(format!("mask {fi} does not match its frame")));
        }
        for y in (0..frame.height()).step_by(stride) {
            for x in (0..frame.width()).step_by(stride) {
                let d = frame.depth.get(x, y);
                if d <= 0.0 || !mask.is_static(x, y) {
                    continue;
                }
                let p = backproject(k, &Point2::new(x as f64, y as f64), d)?;
                points.push(CloudPoint {
                    position: pose.transform(&p),
                    intensity: frame.intensity.get(x, y),
                    frame: fi,
                    pixel: (x, y),
                });
            }
        }
    }
    Ok(points)
}

/// ASCII PLY 1.0 with double coordinates and an 8-bit grey intensity.
pub fn write_ply(path: &Path, points: &[CloudPoint]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    write!(
        w,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nproperty uchar intensity\nend_header\n",
        points.len()
    )
    .map_err(io)?;
    for p in points {
        let grey = (p.intensity.clamp(0.0, 1.0) * 255.0).round() as u8;
        writeln!(w, "{} {} {} {}", p.position.x, p.position.y, p.position.z, grey).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// [`build_point_cloud`] followed by [`write_ply`]; returns the point count.
pub fn export_point_cloud(
    path: &Path,
    frames: &[Frame],
    poses: &[Pose],
    masks: &[MotionMask],
    k: &Intrinsics,
    stride: usize,
) -> Result<usize> {
    let points = build_point_cloud(frames, poses, masks, k, stride)?;
    write_ply(path, &points)?;
    Ok(points.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{se3_exp, Twist};
    use crate::imaging::{DepthImage, Image, IntensityImage};
    use crate::motion_mask::MaskState;
    use nalgebra::Vector6;
    use proptest::prelude::*;

    #[test]
    fn identity_pose_line() {
        assert_eq!(format_pose_line(12.5, &Pose::identity()), "12.5 0 0 0 0 0 0 1");
    }

    #[test]
    fn non_unit_quaternion_is_rejected() {
        let err = parse_trajectory("# c\n1.0 0 0 0 0 0 0 0.5\n", Path::new("t.txt")).unwrap_err();
        assert!(matches!(err, Error::Format { line: 2, .. }), "{err}");
        let err = parse_trajectory("1.0 0 0 0 0 0 1\n", Path::new("t.txt")).unwrap_err();
        assert!(matches!(err, Error::Format { line: 1, .. }));
        let err = parse_trajectory("1.0 0 0 x 0 0 0 1\n", Path::new("t.txt")).unwrap_err();
        assert!(matches!(err, Error::Format { line: 1, .. }));
    }

    #[test]
    fn slightly_off_quaternion_is_normalised() {
        let t = parse_trajectory("1.0 0 0 0 0 0 0 1.0005\n", Path::new("t")).unwrap();
        assert_eq!(*t.entries()[0].1.rotation(), nalgebra::Matrix3::identity());
    }

    #[test]
    fn associate_examples() {
        assert_eq!(associate(&[0.0, 0.1], &[0.005, 0.11], 0.02), vec![(0, 0), (1, 1)]);
        assert_eq!(associate(&[0.0, 0.1], &[0.6], 0.02), vec![]);
        // Greedy: the closer pair wins and the other rgb is left unmatched.
        assert_eq!(associate(&[0.0, 0.012], &[0.01], 0.02), vec![(1, 0)]);
    }

    #[test]
    fn jittered_association_is_complete_and_unique() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let rgb: Vec<f64> = (0..100).map(|i| i as f64 / 30.0).collect();
        let depth: Vec<f64> = rgb.iter().map(|t| t + rng.random_range(-0.008..0.008)).collect();
        let pairs = associate(&rgb, &depth, 0.02);
        assert_eq!(pairs.len(), 100);
        assert!(pairs.iter().all(|(a, b)| a == b));
        let swapped: Vec<_> = associate(&depth, &rgb, 0.02).into_iter().map(|(a, b)| (b, a)).collect();
        let mut swapped = swapped;
        swapped.sort_unstable();
        assert_eq!(swapped, pairs);
    }

    #[test]
    fn load_tum_reports_missing_index() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("rgb.txt"), "0.0 rgb/0.png\n").unwrap();
        assert!(matches!(load_tum(dir.path(), 0.02), Err(Error::Io { .. })));
        fs::write(dir.path().join("depth.txt"), "5.0 depth/0.png\n").unwrap();
        assert!(matches!(load_tum(dir.path(), 0.02), Err(Error::EmptyAssociation(_))));
    }

    #[test]
    fn intrinsics_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(INTRINSICS_FILE);
        let k = Intrinsics::new(262.5, 263.0, 159.5, 119.5, 320, 240, 5000.0).unwrap();
        fs::write(&p, format_intrinsics(&k)).unwrap();
        assert_eq!(read_intrinsics(&p).unwrap(), k);
        fs::write(&p, "focal = 3\n").unwrap();
        assert!(matches!(read_intrinsics(&p), Err(Error::Format { line: 1, .. })));
    }

    fn single_frame(depth: Vec<f64>) -> Frame {
        Frame::new(
            0.0,
            IntensityImage::new(Image::filled(4, 4, 0.5)).unwrap(),
            DepthImage::new(Image::new(4, 4, depth).unwrap()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn point_cloud_from_known_depths() {
        let k = Intrinsics::new(2.0, 2.0, 1.0, 1.0, 4, 4, 1.0).unwrap();
        let f = single_frame((0..16).map(|i| 1.0 + i as f64).collect());
        let mask = MotionMask::from_depth(&f.depth);
        let pts = build_point_cloud(&[f], &[Pose::identity()], &[mask], &k, 2).unwrap();
        // Pixels (0,0), (2,0), (0,2), (2,2) with depths 1, 3, 9, 11.
        let expected = [
            Point3::new(-0.5, -0.5, 1.0),
            Point3::new(1.5, -1.5, 3.0),
            Point3::new(-4.5, 4.5, 9.0),
            Point3::new(5.5, 5.5, 11.0),
        ];
        assert_eq!(pts.len(), 4);
        for (p, e) in pts.iter().zip(&expected) {
            assert!((p.position - e).norm() < 1e-12);
        }
    }

    #[test]
    fn all_dynamic_mask_exports_header_only() {
        let k = Intrinsics::new(2.0, 2.0, 1.0, 1.0, 4, 4, 1.0).unwrap();
        let f = single_frame(vec![1.0; 16]);
        let mask = MotionMask::from_states(4, 4, vec![MaskState::Dynamic; 16]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ply");
        let n = export_point_cloud(&p, &[f], &[Pose::identity()], &[mask], &k, 1).unwrap();
        assert_eq!(n, 0);
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains("element vertex 0"));
        assert!(text.ends_with("end_header\n"));
    }

    #[test]
    fn duplicated_frames_give_coincident_points() {
        let k = Intrinsics::new(2.0, 2.0, 1.0, 1.0, 4, 4, 1.0).unwrap();
        let f = single_frame((0..16).map(|i| 0.5 + i as f64 * 0.1).collect());
        let mask = MotionMask::from_depth(&f.depth);
        let pts = build_point_cloud(
            &[f.clone(), f],
            &[Pose::identity(), Pose::identity()],
            &[mask.clone(), mask],
            &k,
            1,
        )
        .unwrap();
        let (a, b) = pts.split_at(16);
        for (p, q) in a.iter().zip(b) {
            assert!((p.position - q.position).norm() < 1e-9);
        }
    }

    fn pose_strategy() -> impl Strategy<Value = Pose> {
        prop::array::uniform6(-3.0f64..3.0).prop_map(|v| {
            let tw = Twist(Vector6::new(v[0], v[1], v[2], v[3] / 3.0, v[4] / 3.0, v[5] / 3.0));
            se3_exp(&tw).unwrap()
        })
    }

    proptest! {
        #[test]
        fn trajectory_text_roundtrip(poses in prop::collection::vec(pose_strategy(), 1..100)) {
            let traj = Trajectory::new(
                poses.into_iter().enumerate().map(|(i, p)| (1_305_031_102.0 + i as f64 * 0.033, p)).collect(),
            ).unwrap();
            let back = parse_trajectory(&format_trajectory(&traj), Path::new("mem")).unwrap();
            prop_assert_eq!(back.len(), traj.len());
            for ((ta, pa), (tb, pb)) in traj.entries().iter().zip(back.entries()) {
                prop_assert_eq!(ta, tb);
                prop_assert!((pa.rotation() - pb.rotation()).abs().max() < 1e-9);
                prop_assert!((pa.translation() - pb.translation()).abs().max() < 1e-9);
            }
        }
    }
}
