//! Ray-cast synthetic RGB-D sequences with exact ground truth.
//!
//! Scenes are built from infinite planes and axis-aligned boxes. Boxes may
//! move from frame to frame; any box whose centre changes is a mover.

use std::fs;
use std::path::Path;

use nalgebra::{Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::dataset_io::{format_intrinsics, write_trajectory, Trajectory, INTRINSICS_FILE};
use crate::error::{Error, Result};
use crate::geometry::{se3_exp, Intrinsics, Pose, Twist};
use crate::imaging::{save_depth_png, save_intensity_png, DepthImage, Frame, Image, IntensityImage, MAX_DEPTH};
use crate::motion_mask::{MaskState, MotionMask};

/// Procedural albedo, evaluated in surface coordinates (metres).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Texture {
    Checker { size: f64, amplitude: f64 },
    /// Sum of two sinusoids along the surface axes; smooth, with a nonzero
    /// gradient almost everywhere.
    Sinusoid { wavelength: f64, amplitude: f64, phase: f64 },
    Flat(f64),
}

impl Texture {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Texture::Checker { size, amplitude } => size > 0.0 && (0.0..=0.5).contains(&amplitude),
            Texture::Sinusoid { wavelength, amplitude, phase } => {
                wavelength > 0.0 && (0.0..=0.5).contains(&amplitude) && phase.is_finite()
            }
            Texture::Flat(v) => (0.0..=1.0).contains(&v),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid texture {self:?}")))
        }
    }

    pub fn eval(&self, a: f64, b: f64) -> f64 {
        use std::f64::consts::TAU;
        match *self {
            Texture::Checker { size, amplitude } => {
                let parity = ((a / size).floor() + (b / size).floor()).rem_euclid(2.0);
                if parity < 0.5 {
                    0.5 - amplitude
                } else {
                    0.5 + amplitude
                }
            }
            Texture::Sinusoid { wavelength, amplitude, phase } => {
                let s = (TAU * a / wavelength + phase).sin() + (TAU * b / (0.7 * wavelength) + 2.0 * phase + 0.4).sin();
                0.5 + 0.5 * amplitude * s
            }
            Texture::Flat(v) => v,
        }
    }
}

/// The plane `normal · x = offset` in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub normal: Vector3<f64>,
    pub offset: f64,
    pub texture: Texture,
}

impl Plane {
    pub fn new(normal: Vector3<f64>, offset: f64, texture: Texture) -> Result<Self> {
        let n = normal.norm();
        if !(n > 0.0 && n.is_finite() && offset.is_finite()) {
            return Err(Error::InvalidArgument("plane normal must be finite and nonzero".into()));
        }
        texture.validate()?;
        Ok(Plane {
            normal: normal / n,
            offset: offset / n,
            texture,
        })
    }

    /// Fronto-parallel plane `z = depth`.
    pub fn facing(depth: f64, texture: Texture) -> Self {
        Plane {
            normal: Vector3::new(0.0, 0.0, -1.0),
            offset: -depth,
            texture,
        }
    }

    fn basis(&self) -> (Vector3<f64>, Vector3<f64>) {
        let a = if self.normal.y.abs() > 0.9 { Vector3::x() } else { Vector3::y() };
        let e1 = self.normal.cross(&a).normalize();
        (e1, self.normal.cross(&e1))
    }

    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        let denom = self.normal.dot(d);
        if denom == 0.0 {
            return None;
        }
        let s = (self.offset - self.normal.dot(o)) / denom;
        (s > 0.0).then_some(s)
    }
}

/// Axis-aligned box with one centre per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneBox {
    pub half_extents: Vector3<f64>,
    pub centers: Vec<Vector3<f64>>,
    pub texture: Texture,
}

impl SceneBox {
    pub fn stationary(center: Vector3<f64>, half_extents: Vector3<f64>, frames: usize, texture: Texture) -> Self {
        SceneBox {
            half_extents,
            centers: vec![center; frames],
            texture,
        }
    }

    /// Whether the box is somewhere else in frame `b` than in frame `a`.
    pub fn moved_between(&self, a: usize, b: usize) -> bool {
        self.centers[a] != self.centers[b]
    }

    fn contains(&self, frame: usize, p: &Vector3<f64>) -> bool {
        let q = p - self.centers[frame];
        (0..3).all(|i| q[i].abs() < self.half_extents[i])
    }

    /// Ray entry distance and the surface coordinates of the hit.
    fn intersect(&self, frame: usize, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let c = self.centers[frame];
        let (mut t_near, mut t_far, mut axis) = (f64::NEG_INFINITY, f64::INFINITY, 0);
        for i in 0..3 {
            let (lo, hi) = (c[i] - self.half_extents[i], c[i] + self.half_extents[i]);
            if d[i] == 0.0 {
                if o[i] < lo || o[i] > hi {
                    return None;
                }
                continue;
            }
            let (t1, t2) = ((lo - o[i]) / d[i], (hi - o[i]) / d[i]);
            let (a, b) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            if a > t_near {
                t_near = a;
                axis = i;
            }
            t_far = t_far.min(b);
        }
        if t_near > t_far || t_near <= 0.0 {
            return None;
        }
        let q = o + d * t_near - c;
        let (u, v) = match axis {
            0 => (q.y, q.z),
            1 => (q.x, q.z),
            _ => (q.x, q.y),
        };
        Some((t_near, u, v))
    }
}

/// Everything needed to render a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub intrinsics: Intrinsics,
    /// Camera-to-world pose per frame.
    pub camera: Vec<Pose>,
    pub planes: Vec<Plane>,
    pub boxes: Vec<SceneBox>,
    /// Standard deviation of additive depth noise (m).
    pub depth_noise: f64,
    pub frame_interval: f64,
}

impl SceneSpec {
    pub fn frame_count(&self) -> usize {
        self.camera.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        let n = self.frame_count();
        if n < 2 {
            return Err(Error::InvalidArgument("a scene needs at least 2 frames".into()));
        }
        if !(self.depth_noise >= 0.0 && self.depth_noise.is_finite()) {
            return Err(Error::InvalidArgument("depth noise must be finite and non-negative".into()));
        }
        if !(self.frame_interval > 0.0) {
            return Err(Error::InvalidArgument("frame interval must be positive".into()));
        }
        for p in &self.planes {
            p.texture.validate()?;
        }
        for (i, b) in self.boxes.iter().enumerate() {
            b.texture.validate()?;
            if b.centers.len() != n {
                return Err(Error::InvalidArgument(format!(
                    "box {i} has {} centres for {n} frames",
                    b.centers.len()
                )));
            }
            if !(0..3).all(|k| b.half_extents[k] > 0.0) {
                return Err(Error::InvalidArgument(format!("box {i} has a non-positive extent")));
            }
        }
        Ok(())
    }

    /// Timestamp of frame `k`, rounded to microseconds so it survives the
    /// six-decimal index files unchanged.
    pub fn timestamp(&self, k: usize) -> f64 {
        (k as f64 * self.frame_interval * 1e6).round() / 1e6
    }
}

/// Rendered frames plus ground truth.
#[derive(Debug, Clone)]
pub struct RenderedSequence {
    pub spec: SceneSpec,
    pub frames: Vec<Frame>,
    /// Camera-to-world ground truth.
    pub groundtruth: Trajectory,
    /// Per frame: pixels showing a mover that changed pose since the
    /// previous frame (all static in frame 0).
    pub motion_masks: Vec<MotionMask>,
    /// Per frame and pixel: `i + 1` if box `i` is visible there, else 0.
    pub box_ids: Vec<Vec<u16>>,
}

impl RenderedSequence {
    /// Mask over frame `a` marking boxes that move between frames `a` and `b`.
    pub fn pair_motion_mask(&self, a: usize, b: usize) -> MotionMask {
        let moved: Vec<bool> = self.spec.boxes.iter().map(|bx| bx.moved_between(a, b)).collect();
        mover_mask(&self.frames[a].depth, &self.box_ids[a], &moved)
    }

    /// Ground-truth relative pose mapping frame-`a` coordinates to frame `b`.
    pub fn relative_pose(&self, a: usize, b: usize) -> Pose {
        self.spec.camera[b].inverse() * self.spec.camera[a]
    }
}

fn mover_mask(depth: &DepthImage, ids: &[u16], moved: &[bool]) -> MotionMask {
    let states = ids
        .iter()
        .zip(depth.data())
        .map(|(&id, &d)| {
            if d <= 0.0 {
                MaskState::Invalid
            } else if id > 0 && moved[id as usize - 1] {
                MaskState::Dynamic
            } else {
                MaskState::Static
            }
        })
        .collect();
    MotionMask::from_states(depth.width(), depth.height(), states).expect("sizes agree")
}

struct Hit {
    depth: f64,
    intensity: f64,
    box_id: u16,
}

fn cast(spec: &SceneSpec, frame: usize, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    let mut consider = |s: f64, intensity: f64, box_id: u16| {
        if best.as_ref().is_none_or(|b| s < b.depth) {
            best = Some(Hit { depth: s, intensity, box_id });
        }
    };
    for plane in &spec.planes {
        if let Some(s) = plane.intersect(o, d) {
            let p = o + d * s;
            let (e1, e2) = plane.basis();
            consider(s, plane.texture.eval(p.dot(&e1), p.dot(&e2)), 0);
        }
    }
    for (i, bx) in spec.boxes.iter().enumerate() {
        if let Some((s, u, v)) = bx.intersect(frame, o, d) {
            consider(s, bx.texture.eval(u, v), i as u16 + 1);
        }
    }
    best
}

/// Ray-casts every frame. Depth is the z coordinate of the nearest hit in
/// the camera frame; noise is drawn from a per-frame stream of `seed`.
pub fn render_sequence(spec: &SceneSpec, seed: u64) -> Result<RenderedSequence> {
    spec.validate()?;
    let k = &spec.intrinsics;
    let (w, h) = (k.width, k.height);
    let mut frames = Vec::with_capacity(spec.frame_count());
    let mut box_ids = Vec::with_capacity(spec.frame_count());
    let mut groundtruth = Trajectory::default();
    let noise = (spec.depth_noise > 0.0)
        .then(|| Normal::new(0.0, spec.depth_noise).map_err(|e| Error::InvalidArgument(e.to_string())))
        .transpose()?;

    for (f, cam) in spec.camera.iter().enumerate() {
        let origin = *cam.translation();
        if let Some(i) = spec.boxes.iter().position(|b| b.contains(f, &origin)) {
            return Err(Error::DegenerateScene(format!("camera is inside box {i} at frame {f}")));
        }
        let rows: Vec<(Vec<f64>, Vec<f64>, Vec<u16>)> = (0..h)
            .into_par_iter()
            .map(|y| {
                let mut depth = vec![0.0; w];
                let mut intensity = vec![0.0; w];
                let mut ids = vec![0u16; w];
                for x in 0..w {
                    let ray = Vector3::new((x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0);
                    let d = cam.rotation() * ray;
                    if let Some(hit) = cast(spec, f, &origin, &d) {
                        if hit.depth < MAX_DEPTH {
                            depth[x] = hit.depth;
                            intensity[x] = hit.intensity;
                            ids[x] = hit.box_id;
                        }
                    }
                }
                (depth, intensity, ids)
            })
            .collect();
        let mut depth = Vec::with_capacity(w * h);
        let mut intensity = Vec::with_capacity(w * h);
        let mut ids = Vec::with_capacity(w * h);
        for (d, i, b) in rows {
            depth.extend(d);
            intensity.extend(i);
            ids.extend(b);
        }
        if let Some(noise) = &noise {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(f as u64);
            for d in depth.iter_mut().filter(|d| **d > 0.0) {
                *d = (*d + noise.sample(&mut rng)).clamp(1e-3, MAX_DEPTH - 1e-3);
            }
        }
        let t = spec.timestamp(f);
        frames.push(Frame::new(
            t,
            IntensityImage::new(Image::new(w, h, intensity)?)?,
            DepthImage::new(Image::new(w, h, depth)?)?,
        )?);
        box_ids.push(ids);
        groundtruth.push(t, *cam)?;
    }

    let motion_masks = (0..frames.len())
        .map(|f| {
            let moved: Vec<bool> = spec.boxes.iter().map(|b| f > 0 && b.moved_between(f - 1, f)).collect();
            mover_mask(&frames[f].depth, &box_ids[f], &moved)
        })
        .collect();
    Ok(RenderedSequence {
        spec: spec.clone(),
        frames,
        groundtruth,
        motion_masks,
        box_ids,
    })
}

/// Writes a TUM-layout directory: `rgb/`, `depth/`, `masks/`, the index
/// files, `groundtruth.txt` and `intrinsics.txt`.
pub fn write_tum_dataset(dir: &Path, seq: &RenderedSequence) -> Result<()> {
    let k = &seq.spec.intrinsics;
    for sub in ["rgb", "depth", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut rgb_index = String::from("# color images\n# timestamp filename\n");
    let mut depth_index = String::from("# depth maps\n# timestamp filename\n");
    for (frame, mask) in seq.frames.iter().zip(&seq.motion_masks) {
        let name = format!("{:.6}.png", frame.timestamp);
        save_intensity_png(&dir.join("rgb").join(&name), &frame.intensity)?;
        save_depth_png(&dir.join("depth").join(&name), &frame.depth, k.depth_scale)?;
        mask.save_png(&dir.join("masks").join(&name))?;
        rgb_index.push_str(&format!("{:.6} rgb/{name}\n", frame.timestamp));
        depth_index.push_str(&format!("{:.6} depth/{name}\n", frame.timestamp));
    }
    let write = |name: &str, text: &str| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("rgb.txt", &rgb_index)?;
    write("depth.txt", &depth_index)?;
    write(INTRINSICS_FILE, &format_intrinsics(k))?;
    write_trajectory(&dir.join("groundtruth.txt"), &seq.groundtruth)
}

fn parse_floats(tokens: &[&str]) -> std::result::Result<Vec<f64>, String> {
    tokens
        .iter()
        .map(|t| t.parse::<f64>().map_err(|e| format!("bad number `{t}`: {e}")))
        .collect()
}

fn parse_texture(tokens: &[&str]) -> std::result::Result<Texture, String> {
    let nums = parse_floats(tokens.get(1..).unwrap_or(&[]))?;
    let tex = match (tokens.first().copied(), nums.as_slice()) {
        (None, _) => DEFAULT_TEXTURE,
        (Some("checker"), &[size, amplitude]) => Texture::Checker { size, amplitude },
        (Some("sinusoid"), &[wavelength, amplitude]) => Texture::Sinusoid { wavelength, amplitude, phase: 0.0 },
        (Some("sinusoid"), &[wavelength, amplitude, phase]) => Texture::Sinusoid { wavelength, amplitude, phase },
        (Some("flat"), &[v]) => Texture::Flat(v),
        _ => return Err(format!("bad texture `{}`", tokens.join(" "))),
    };
    tex.validate().map_err(|e| e.to_string())?;
    Ok(tex)
}

/// Texture used when a scene line gives none.
pub const DEFAULT_TEXTURE: Texture = Texture::Sinusoid {
    wavelength: 0.25,
    amplitude: 0.3,
    phase: 0.0,
};

fn twist_of(v: &[f64]) -> Twist {
    Twist(Vector6::from_column_slice(v))
}

/// Parses a scene file.
///
/// ```text
/// width = 320            # also height, fx, fy, cx, cy, depth_scale
/// frames = 10
/// frame_interval = 0.033333
/// depth_noise = 0.0
/// camera_start = tx ty tz rx ry rz   # pose of frame 0 as a twist
/// camera_step = tx ty tz rx ry rz    # pose_k = exp(start) * exp(k * step)
/// plane = nx ny nz offset [texture]
/// box = cx cy cz hx hy hz [vx vy vz [first last]] [texture]
/// ```
///
/// A box moves by `v` per frame for frames `first+1..=last`. Textures are
/// `checker size amp`, `sinusoid wavelength amp [phase]` or `flat value`.
pub fn parse_scene(text: &str, origin: &Path) -> Result<SceneSpec> {
    let mut k = Intrinsics {
        fx: 262.5,
        fy: 262.5,
        cx: 159.5,
        cy: 119.5,
        width: 320,
        height: 240,
        depth_scale: 5000.0,
    };
    let mut frames = 2usize;
    let mut interval = 1.0 / 30.0;
    let mut noise = 0.0;
    let mut start = Twist::zero();
    let mut step = Twist::zero();
    let mut planes = Vec::new();
    // (centre, half extents, velocity, first, last, texture, line)
    let mut boxes: Vec<(Vector3<f64>, Vector3<f64>, Vector3<f64>, Option<(usize, usize)>, Texture)> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let err = |m: String| Error::format(origin, lineno, m);
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(err("expected `key = value`".into()));
        };
        let key = key.trim();
        let tokens: Vec<&str> = value.split_whitespace().collect();
        let scalar = || -> Result<f64> {
            match tokens.as_slice() {
                [v] => v.parse::<f64>().map_err(|e| err(format!("bad number: {e}"))),
                _ => Err(err(format!("`{key}` takes one value"))),
            }
        };
        let count = || -> Result<usize> {
            match tokens.as_slice() {
                [v] => v.parse::<usize>().map_err(|e| err(format!("bad integer: {e}"))),
                _ => Err(err(format!("`{key}` takes one value"))),
            }
        };
        match key {
            "width" => k.width = count()?,
            "height" => k.height = count()?,
            "fx" => k.fx = scalar()?,
            "fy" => k.fy = scalar()?,
            "cx" => k.cx = scalar()?,
            "cy" => k.cy = scalar()?,
            "depth_scale" => k.depth_scale = scalar()?,
            "frames" => frames = count()?,
            "frame_interval" => interval = scalar()?,
            "depth_noise" => noise = scalar()?,
            "camera_start" | "camera_step" => {
                let v = parse_floats(&tokens).map_err(err)?;
                if v.len() != 6 {
                    return Err(err(format!("`{key}` takes 6 numbers")));
                }
                if key == "camera_start" {
                    start = twist_of(&v);
                } else {
                    step = twist_of(&v);
                }
            }
            "plane" => {
                let n_num = tokens.iter().take_while(|t| t.parse::<f64>().is_ok()).count();
                let v = parse_floats(&tokens[..n_num]).map_err(err)?;
                if v.len() != 4 {
                    return Err(err("`plane` takes nx ny nz offset".into()));
                }
                let tex = parse_texture(&tokens[n_num..]).map_err(err)?;
                planes.push(
                    Plane::new(Vector3::new(v[0], v[1], v[2]), v[3], tex).map_err(|e| err(e.to_string()))?,
                );
            }
            "box" => {
                let n_num = tokens.iter().take_while(|t| t.parse::<f64>().is_ok()).count();
                let v = parse_floats(&tokens[..n_num]).map_err(err)?;
                let tex = parse_texture(&tokens[n_num..]).map_err(err)?;
                let (vel, range) = match v.len() {
                    6 => (Vector3::zeros(), None),
                    9 => (Vector3::new(v[6], v[7], v[8]), None),
                    11 => {
                        let (a, b) = (v[9], v[10]);
                        if a < 0.0 || b < a || a.fract() != 0.0 || b.fract() != 0.0 {
                            return Err(err("box frame range must be integers with first <= last".into()));
                        }
                        (Vector3::new(v[6], v[7], v[8]), Some((a as usize, b as usize)))
                    }
                    n => return Err(err(format!("`box` takes 6, 9 or 11 numbers, found {n}"))),
                };
                boxes.push((Vector3::new(v[0], v[1], v[2]), Vector3::new(v[3], v[4], v[5]), vel, range, tex));
            }
            other => return Err(err(format!("unknown key `{other}`"))),
        }
    }

    let base = se3_exp(&start)?;
    let camera = (0..frames)
        .map(|f| Ok(base * se3_exp(&Twist(step.0 * f as f64))?))
        .collect::<Result<Vec<_>>>()?;
    let boxes = boxes
        .into_iter()
        .map(|(c, h, vel, range, texture)| {
            let (first, last) = range.unwrap_or((0, frames));
            SceneBox {
                half_extents: h,
                centers: (0..frames)
                    .map(|f| c + vel * (f.clamp(first, last) - first) as f64)
                    .collect(),
                texture,
            }
        })
        .collect();
    let spec = SceneSpec {
        intrinsics: k,
        camera,
        planes,
        boxes,
        depth_noise: noise,
        frame_interval: interval,
    };
    spec.validate().map_err(|e| Error::format(origin, 0, e.to_string()))?;
    Ok(spec)
}

/// Ready-made scenes used by the tests and the acceptance suite.
pub mod presets {
    use super::*;

    /// 320×240 camera with the TUM default field of view.
    pub fn qvga() -> Intrinsics {
        Intrinsics::tum_default().downsampled()
    }

    fn camera_script(frames: usize, step: &Twist) -> Result<Vec<Pose>> {
        (0..frames).map(|f| se3_exp(&Twist(step.0 * f as f64))).collect()
    }

    fn wall(depth: f64) -> Plane {
        Plane::new(
            Vector3::new(0.08, -0.05, -1.0),
            -depth,
            Texture::Sinusoid { wavelength: 0.3, amplitude: 0.3, phase: 0.0 },
        )
        .expect("valid plane")
    }

    /// Slightly tilted textured plane about 2 m away, seen from frame 0 at
    /// the origin and from frame 1 displaced by `relative` (which maps
    /// frame-0 coordinates to frame-1 coordinates).
    pub fn textured_plane_pair(relative: &Pose) -> SceneSpec {
        SceneSpec {
            intrinsics: qvga(),
            camera: vec![Pose::identity(), relative.inverse()],
            planes: vec![wall(2.0)],
            boxes: vec![],
            depth_noise: 0.0,
            frame_interval: 1.0 / 30.0,
        }
    }

    /// Wall, floor and side wall with a static box on the floor.
    fn room_planes() -> Vec<Plane> {
        vec![
            wall(3.0),
            Plane::new(
                Vector3::new(0.0, -1.0, 0.0),
                -0.8,
                Texture::Sinusoid { wavelength: 0.35, amplitude: 0.25, phase: 1.0 },
            )
            .expect("valid plane"),
            Plane::new(
                Vector3::new(1.0, 0.0, 0.0),
                -1.6,
                Texture::Sinusoid { wavelength: 0.3, amplitude: 0.3, phase: 2.0 },
            )
            .expect("valid plane"),
        ]
    }

    /// Static room seen by a camera advancing by `step` each frame.
    pub fn static_room(frames: usize, step: &Twist) -> Result<SceneSpec> {
        Ok(SceneSpec {
            intrinsics: qvga(),
            camera: camera_script(frames, step)?,
            planes: room_planes(),
            boxes: vec![SceneBox::stationary(
                Vector3::new(0.6, 0.55, 2.2),
                Vector3::new(0.25, 0.25, 0.25),
                frames,
                Texture::Sinusoid { wavelength: 0.2, amplitude: 0.3, phase: 0.5 },
            )],
            depth_noise: 0.0,
            frame_interval: 1.0 / 30.0,
        })
    }

    /// Small per-frame camera motion used by the dynamic scenes.
    pub fn gentle_step() -> Twist {
        Twist(Vector6::new(0.008, -0.002, 0.004, 0.001, -0.003, 0.0015))
    }

    /// Box in front of the room whose front face spans about 15% of the
    /// frame, moving `displacement` metres along x per frame.
    pub fn moving_box(frames: usize, displacement: f64, step: &Twist) -> Result<SceneSpec> {
        let mut spec = static_room(frames, step)?;
        spec.boxes.push(SceneBox {
            half_extents: Vector3::new(0.355, 0.265, 0.1),
            centers: (0..frames)
                .map(|f| Vector3::new(-0.25 + displacement * f as f64, -0.05, 1.6))
                .collect(),
            texture: Texture::Sinusoid { wavelength: 0.12, amplitude: 0.35, phase: 0.3 },
        });
        Ok(spec)
    }

    /// A camera circling slowly inside the static room.
    pub fn orbit(frames: usize) -> Result<SceneSpec> {
        static_room(frames, &Twist(Vector6::new(0.01, 0.0, 0.003, 0.0, -0.004, 0.0)))
    }
}
