//! Image containers, depth hole filling, interpolation, gradients and pyramids.

use std::ops::Deref;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};

/// Luma weights for RGB → gray.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Depths at or above this are rejected as corrupt.
pub const MAX_DEPTH: f64 = 100.0;

/// Row-major scalar grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "{} values for a {}x{} image",
                data.len(),
                width,
                height
            )));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Image {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Image {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        self.data[y * self.width + x] = value;
    }

    pub fn row(&self, y: usize) -> &[f64] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    /// Bilinear interpolation. `None` if any of the four neighbours is out of
    /// bounds.
    pub fn sample(&self, u: f64, v: f64) -> Option<f64> {
        self.sample_with_gradient(u, v).map(|s| s.value)
    }

    /// Bilinear interpolation together with the exact derivative of the
    /// interpolant with respect to `u` and `v`.
    pub fn sample_with_gradient(&self, u: f64, v: f64) -> Option<Sample> {
        let cell = Cell::locate(self.width, self.height, u, v)?;
        let [a, b, c, d] = cell.corners(self);
        Some(cell.blend(a, b, c, d))
    }
}

/// Value and local derivatives of an interpolated sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub value: f64,
    pub du: f64,
    pub dv: f64,
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    x0: usize,
    y0: usize,
    fx: f64,
    fy: f64,
}

impl Cell {
    #[inline]
    fn locate(width: usize, height: usize, u: f64, v: f64) -> Option<Cell> {
        if width < 2 || height < 2 {
            return None;
        }
        if !(u >= 0.0 && v >= 0.0 && u <= (width - 1) as f64 && v <= (height - 1) as f64) {
            return None;
        }
        // Points on the last row/column are treated as the far corner of the
        // previous cell so that all four neighbours stay in bounds.
        let x0 = (u.floor() as usize).min(width - 2);
        let y0 = (v.floor() as usize).min(height - 2);
        Some(Cell {
            x0,
            y0,
            fx: u - x0 as f64,
            fy: v - y0 as f64,
        })
    }

    #[inline]
    fn corners(&self, img: &Image) -> [f64; 4] {
        let i = self.y0 * img.width + self.x0;
        let w = img.width;
        [img.data[i], img.data[i + 1], img.data[i + w], img.data[i + w + 1]]
    }

    #[inline]
    fn blend(&self, a: f64, b: f64, c: f64, d: f64) -> Sample {
        let (fx, fy) = (self.fx, self.fy);
        let top = a + fx * (b - a);
        let bottom = c + fx * (d - c);
        Sample {
            value: top + fy * (bottom - top),
            du: (1.0 - fy) * (b - a) + fy * (d - c),
            dv: bottom - top,
        }
    }
}

/// Grayscale intensity in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityImage(Image);

impl IntensityImage {
    pub fn new(image: Image) -> Result<Self> {
        if !image.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("intensity values must lie in [0, 1]".into()));
        }
        Ok(IntensityImage(image))
    }

    pub fn into_inner(self) -> Image {
        self.0
    }
}

impl Deref for IntensityImage {
    type Target = Image;

    fn deref(&self) -> &Image {
        &self.0
    }
}

/// Metric depth; zero marks a hole.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage(Image);

impl DepthImage {
    pub fn new(image: Image) -> Result<Self> {
        if !image.data.iter().all(|v| v.is_finite() && *v >= 0.0 && *v < MAX_DEPTH) {
            return Err(Error::InvalidArgument(format!(
                "depth values must lie in [0, {MAX_DEPTH})"
            )));
        }
        Ok(DepthImage(image))
    }

    pub fn into_inner(self) -> Image {
        self.0
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.0.get(x, y) > 0.0
    }

    pub fn valid_count(&self) -> usize {
        self.0.data.iter().filter(|&&d| d > 0.0).count()
    }

    /// Bilinear depth; invalid if a neighbour is out of bounds or a hole.
    pub fn sample(&self, u: f64, v: f64) -> Option<f64> {
        self.sample_with_gradient(u, v).map(|s| s.value)
    }

    pub fn sample_with_gradient(&self, u: f64, v: f64) -> Option<Sample> {
        let cell = Cell::locate(self.0.width, self.0.height, u, v)?;
        let [a, b, c, d] = cell.corners(&self.0);
        if a <= 0.0 || b <= 0.0 || c <= 0.0 || d <= 0.0 {
            return None;
        }
        Some(cell.blend(a, b, c, d))
    }
}

impl Deref for DepthImage {
    type Target = Image;

    fn deref(&self) -> &Image {
        &self.0
    }
}

/// One RGB-D capture.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub timestamp: f64,
    pub intensity: IntensityImage,
    pub depth: DepthImage,
}

impl Frame {
    pub fn new(timestamp: f64, intensity: IntensityImage, depth: DepthImage) -> Result<Self> {
        if !timestamp.is_finite() {
            return Err(Error::InvalidArgument("non-finite timestamp".into()));
        }
        if intensity.width() != depth.width() || intensity.height() != depth.height() {
            return Err(Error::InvalidArgument(format!(
                "intensity {}x{} and depth {}x{} differ",
                intensity.width(),
                intensity.height(),
                depth.width(),
                depth.height()
            )));
        }
        Ok(Frame {
            timestamp,
            intensity,
            depth,
        })
    }

    pub fn width(&self) -> usize {
        self.intensity.width()
    }

    pub fn height(&self) -> usize {
        self.intensity.height()
    }

    /// Same frame with holes filled.
    pub fn hole_filled(&self) -> Frame {
        Frame {
            timestamp: self.timestamp,
            intensity: self.intensity.clone(),
            depth: fill_depth_holes(&self.depth),
        }
    }
}

/// Per-pixel image derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub gx: Image,
    pub gy: Image,
}

/// Central differences in the interior, one-sided differences on the border.
pub fn gradient(img: &IntensityImage) -> Result<Gradient> {
    let (w, h) = (img.width(), img.height());
    if w < 3 || h < 3 {
        return Err(Error::InvalidArgument(format!(
            "gradient needs at least 3x3 pixels, got {w}x{h}"
        )));
    }
    let gx = Image::from_fn(w, h, |x, y| match x {
        0 => img.get(1, y) - img.get(0, y),
        x if x == w - 1 => img.get(x, y) - img.get(x - 1, y),
        x => 0.5 * (img.get(x + 1, y) - img.get(x - 1, y)),
    });
    let gy = Image::from_fn(w, h, |x, y| match y {
        0 => img.get(x, 1) - img.get(x, 0),
        y if y == h - 1 => img.get(x, y) - img.get(x, y - 1),
        y => 0.5 * (img.get(x, y + 1) - img.get(x, y - 1)),
    });
    Ok(Gradient { gx, gy })
}

/// Right-neighbour hole filling followed by a 3x3 grey-level closing.
///
/// Zeros take the nearest non-zero value to their right; a zero tail takes
/// the nearest non-zero value to its left. Rows without any valid pixel stay
/// zero and are ignored by the closing.
pub fn fill_depth_holes(depth: &DepthImage) -> DepthImage {
    close_3x3(&fill_row_holes(depth))
}

/// The row-wise propagation step of [`fill_depth_holes`].
pub fn fill_row_holes(depth: &DepthImage) -> DepthImage {
    let (w, h) = (depth.width(), depth.height());
    let mut out = depth.0.clone();
    for y in 0..h {
        let row = &mut out.data[y * w..(y + 1) * w];
        let mut next_valid = 0.0;
        for x in (0..w).rev() {
            if row[x] > 0.0 {
                next_valid = row[x];
            } else {
                row[x] = next_valid;
            }
        }
        let mut last_valid = 0.0;
        for value in row.iter_mut() {
            if *value > 0.0 {
                last_valid = *value;
            } else {
                *value = last_valid;
            }
        }
    }
    DepthImage(out)
}

/// Grey-level closing (dilation then erosion) with a flat 3x3 element.
/// Only valid pixels take part; holes stay holes.
pub fn close_3x3(depth: &DepthImage) -> DepthImage {
    let dilated = morph_3x3(&depth.0, f64::max);
    let closed = morph_3x3(&dilated, f64::min);
    DepthImage(closed)
}

fn morph_3x3(img: &Image, pick: fn(f64, f64) -> f64) -> Image {
    let (w, h) = (img.width, img.height);
    Image::from_fn(w, h, |x, y| {
        let centre = img.get(x, y);
        if centre <= 0.0 {
            return 0.0;
        }
        let mut acc = centre;
        for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
            for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                let v = img.get(nx, ny);
                if v > 0.0 {
                    acc = pick(acc, v);
                }
            }
        }
        acc
    })
}

/// Halves both dimensions with 2x2 averaging. Depth averages only the valid
/// members of each block.
pub fn downsample(frame: &Frame) -> Frame {
    let (w, h) = (frame.width() / 2, frame.height() / 2);
    let intensity = Image::from_fn(w, h, |x, y| {
        let i = &frame.intensity;
        0.25 * (i.get(2 * x, 2 * y) + i.get(2 * x + 1, 2 * y) + i.get(2 * x, 2 * y + 1) + i.get(2 * x + 1, 2 * y + 1))
    });
    let depth = Image::from_fn(w, h, |x, y| {
        let d = &frame.depth;
        let (sum, n) = [(0, 0), (1, 0), (0, 1), (1, 1)]
            .iter()
            .map(|(dx, dy)| d.get(2 * x + dx, 2 * y + dy))
            .filter(|&v| v > 0.0)
            .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    });
    Frame {
        timestamp: frame.timestamp,
        intensity: IntensityImage(intensity),
        depth: DepthImage(depth),
    }
}

/// `levels` frames, finest first.
pub fn pyramid(frame: &Frame, levels: usize) -> Vec<Frame> {
    let mut out = Vec::with_capacity(levels);
    out.push(frame.clone());
    for _ in 1..levels {
        let next = downsample(out.last().expect("non-empty pyramid"));
        out.push(next);
    }
    out
}

/// Loads an 8-bit colour (or grey) PNG as luma intensity in `[0, 1]`.
pub fn load_intensity_png(path: &Path) -> Result<IntensityImage> {
    let img = open_image(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img
        .pixels()
        .map(|p| {
            (LUMA_WEIGHTS[0] * p[0] as f64 + LUMA_WEIGHTS[1] * p[1] as f64 + LUMA_WEIGHTS[2] * p[2] as f64)
                / 255.0
        })
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    Ok(IntensityImage(Image::new(w as usize, h as usize, data)?))
}

/// Loads a 16-bit depth PNG, dividing raw values by `depth_scale`.
pub fn load_depth_png(path: &Path, depth_scale: f64) -> Result<DepthImage> {
    let img = open_image(path)?;
    let DynamicImage::ImageLuma16(buf) = img else {
        return Err(Error::format(path, 0, "depth PNG must be 16-bit single channel"));
    };
    let (w, h) = buf.dimensions();
    let data: Vec<f64> = buf.pixels().map(|p| p[0] as f64 / depth_scale).collect();
    DepthImage::new(Image::new(w as usize, h as usize, data)?)
}

/// Writes intensity as an 8-bit RGB PNG with identical channels.
pub fn save_intensity_png(path: &Path, img: &Image) -> Result<()> {
    let buf = ImageBuffer::from_fn(img.width() as u32, img.height() as u32, |x, y| {
        let v = (img.get(x as usize, y as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([v, v, v])
    });
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes depth as a 16-bit PNG in raw units (`meters · depth_scale`).
pub fn save_depth_png(path: &Path, depth: &DepthImage, depth_scale: f64) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(depth.width() as u32, depth.height() as u32, |x, y| {
            let raw = (depth.get(x as usize, y as usize) * depth_scale).round();
            Luma([raw.clamp(0.0, u16::MAX as f64) as u16])
        });
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn open_image(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Image {
            path: path.to_path_buf(),
            source,
        },
    })
}
