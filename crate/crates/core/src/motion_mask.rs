//! Depth-only pre-elimination of moving objects.
//!
//! The depth image is tiled into square regions. Inside every region that
//! straddles a depth-cluster boundary, the depth gap across each boundary
//! pixel pair is compared with the gap at the same place in the next frame.
//! Pure camera translation leaves those gaps unchanged, and a rotation scales
//! them by a common factor; a region whose gaps do neither is dynamic. The
//! moving side of a dynamic region's edges decides which depth cluster moved,
//! and that cluster's largest connected component is removed.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::{GrayImage, Luma};

use crate::clustering::{assign_to_centroids, connected_components, ClusterMap, Components, NO_COMPONENT};
use crate::error::{Error, Result};
use crate::imaging::{DepthImage, Frame};

/// Smallest admissible region edge length.
pub const MIN_BLOCK: usize = 8;

/// Tuning of the pre-elimination stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentationConfig {
    /// Region edge length in pixels.
    pub block: usize,
    /// Largest gap change (m) still explained by camera translation.
    pub tau_abs: f64,
    /// Largest deviation of a gap ratio from the region's median ratio.
    pub tau_rel: f64,
    /// Median gap ratios outside this band are not attributed to camera rotation.
    pub ratio_band: (f64, f64),
    /// Search distance (px) along the edge normal when pairing edges across frames.
    pub pair_window: usize,
    /// Half-size (px) of the window used to decide whether a pixel's depth changed.
    pub change_window: usize,
    /// Regions scoring above this are dynamic.
    pub dynamic_threshold: f64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        SegmentationConfig {
            block: 40,
            tau_abs: 0.05,
            tau_rel: 0.1,
            ratio_band: (0.8, 1.25),
            pair_window: 10,
            change_window: 2,
            dynamic_threshold: 0.5,
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block < MIN_BLOCK {
            return Err(Error::InvalidArgument(format!(
                "block size {} is below the minimum of {MIN_BLOCK}",
                self.block
            )));
        }
        let (lo, hi) = self.ratio_band;
        if !(self.tau_abs > 0.0 && self.tau_rel > 0.0 && lo > 0.0 && lo <= hi) {
            return Err(Error::InvalidArgument("segmentation tolerances must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.dynamic_threshold) {
            return Err(Error::InvalidArgument("dynamic threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Regular tiling of the image into `block × block` cells; the last column
/// and row of cells may be narrower.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionGrid {
    width: usize,
    height: usize,
    block: usize,
    cols: usize,
    rows: usize,
}

pub fn partition_regions(width: usize, height: usize, block: usize) -> Result<RegionGrid> {
    if block < MIN_BLOCK {
        return Err(Error::InvalidArgument(format!(
            "block size {block} is below the minimum of {MIN_BLOCK}"
        )));
    }
    Ok(RegionGrid {
        width,
        height,
        block,
        cols: width.div_ceil(block),
        rows: height.div_ceil(block),
    })
}

impl RegionGrid {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn block(&self) -> usize {
        self.block
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn len(&self) -> usize {
        self.cols * self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn region_of(&self, x: usize, y: usize) -> usize {
        (y / self.block) * self.cols + x / self.block
    }

    /// Half-open pixel bounds `(x0, y0, x1, y1)` of a region.
    pub fn bounds(&self, region: usize) -> (usize, usize, usize, usize) {
        let (cx, cy) = (region % self.cols, region / self.cols);
        let x0 = cx * self.block;
        let y0 = cy * self.block;
        (x0, y0, (x0 + self.block).min(self.width), (y0 + self.block).min(self.height))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EdgeDirection {
    /// Between `(x, y)` and `(x + 1, y)`.
    Horizontal,
    /// Between `(x, y)` and `(x, y + 1)`.
    Vertical,
}

/// One label-transition pixel pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeSample {
    pub x: usize,
    pub y: usize,
    pub direction: EdgeDirection,
    pub near_pixel: (usize, usize),
    pub far_pixel: (usize, usize),
    pub near_depth: f64,
    pub far_depth: f64,
    pub near_cluster: u16,
    pub far_cluster: u16,
    /// `far_depth − near_depth`.
    pub gap: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RegionProfile {
    pub samples: Vec<EdgeSample>,
}

impl RegionProfile {
    pub fn is_edge(&self) -> bool {
        !self.samples.is_empty()
    }
}

/// Edge samples of every region, plus a per-scanline index used to pair edges
/// positionally with another frame.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeGapProfile {
    regions: Vec<RegionProfile>,
    /// `rows[y]`: `(x, gap)` of horizontal transitions on row `y`, sorted by `x`.
    rows: Vec<Vec<(usize, f64)>>,
    /// `cols[x]`: `(y, gap)` of vertical transitions on column `x`, sorted by `y`.
    cols: Vec<Vec<(usize, f64)>>,
}

impl EdgeGapProfile {
    pub fn regions(&self) -> &[RegionProfile] {
        &self.regions
    }

    pub fn region(&self, r: usize) -> &RegionProfile {
        &self.regions[r]
    }

    pub fn edge_region_count(&self) -> usize {
        self.regions.iter().filter(|r| r.is_edge()).count()
    }

    /// Gap of the transition nearest to `(x, y)` along the scanline of the
    /// given direction, within `window` pixels; zero when there is none.
    pub fn gap_near(&self, x: usize, y: usize, direction: EdgeDirection, window: usize) -> f64 {
        let (line, pos) = match direction {
            EdgeDirection::Horizontal => (self.rows.get(y), x),
            EdgeDirection::Vertical => (self.cols.get(x), y),
        };
        let Some(line) = line else { return 0.0 };
        let start = line.partition_point(|&(p, _)| p + window < pos);
        line[start..]
            .iter()
            .take_while(|&&(p, _)| p <= pos + window)
            .min_by_key(|&&(p, _)| p.abs_diff(pos))
            .map_or(0.0, |&(_, gap)| gap)
    }
}

pub fn edge_gap_profile(depth: &DepthImage, grid: &RegionGrid, cmap: &ClusterMap) -> Result<EdgeGapProfile> {
    let (w, h) = (depth.width(), depth.height());
    if cmap.width() != w || cmap.height() != h || grid.width() != w || grid.height() != h {
        return Err(Error::InvalidArgument("depth, grid and cluster map dimensions differ".into()));
    }
    let mut regions = vec![RegionProfile::default(); grid.len()];
    let mut rows = vec![Vec::new(); h];
    let mut cols = vec![Vec::new(); w];
    for y in 0..h {
        for x in 0..w {
            let la = cmap.label(x, y);
            if la == crate::clustering::INVALID_LABEL {
                continue;
            }
            for direction in [EdgeDirection::Horizontal, EdgeDirection::Vertical] {
                let (nx, ny) = match direction {
                    EdgeDirection::Horizontal if x + 1 < w => (x + 1, y),
                    EdgeDirection::Vertical if y + 1 < h => (x, y + 1),
                    _ => continue,
                };
                let lb = cmap.label(nx, ny);
                if lb == crate::clustering::INVALID_LABEL || lb == la {
                    continue;
                }
                let (da, db) = (depth.get(x, y), depth.get(nx, ny));
                let ((near_pixel, near_depth, near_cluster), (far_pixel, far_depth, far_cluster)) = if da <= db {
                    (((x, y), da, la), ((nx, ny), db, lb))
                } else {
                    (((nx, ny), db, lb), ((x, y), da, la))
                };
                let gap = far_depth - near_depth;
                regions[grid.region_of(x, y)].samples.push(EdgeSample {
                    x,
                    y,
                    direction,
                    near_pixel,
                    far_pixel,
                    near_depth,
                    far_depth,
                    near_cluster,
                    far_cluster,
                    gap,
                });
                match direction {
                    EdgeDirection::Horizontal => rows[y].push((x, gap)),
                    EdgeDirection::Vertical => cols[x].push((y, gap)),
                }
            }
        }
    }
    // Row entries were pushed in increasing x; column entries in increasing y.
    Ok(EdgeGapProfile { regions, rows, cols })
}

/// Gap of each edge sample of `region` in frame A, with its positional partner
/// in frame B (zero when the edge has vanished).
fn paired_gaps<'a>(
    prof_a: &'a EdgeGapProfile,
    prof_b: &'a EdgeGapProfile,
    region: usize,
    cfg: &'a SegmentationConfig,
) -> impl Iterator<Item = (&'a EdgeSample, f64)> + 'a {
    prof_a.regions[region]
        .samples
        .iter()
        .map(move |s| (s, prof_b.gap_near(s.x, s.y, s.direction, cfg.pair_window)))
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Per-pair consistency flags for one region.
fn consistency(pairs: &[(&EdgeSample, f64)], cfg: &SegmentationConfig) -> Vec<bool> {
    let mut ratios: Vec<f64> = pairs.iter().filter(|(a, _)| a.gap > 0.0).map(|(a, gb)| gb / a.gap).collect();
    let rho = median(&mut ratios);
    let rotation_plausible = rho >= cfg.ratio_band.0 && rho <= cfg.ratio_band.1;
    pairs
        .iter()
        .map(|(a, gap_b)| {
            let translation_ok = (gap_b - a.gap).abs() <= cfg.tau_abs;
            let proportional_ok = rotation_plausible && a.gap > 0.0 && (gap_b / a.gap - rho).abs() <= cfg.tau_rel;
            translation_ok || proportional_ok
        })
        .collect()
}

/// Gap-weighted fraction of edge pairs in `region` that violate both the
/// constant-gap and the proportional-gap constraint. Zero for regions without
/// edges.
pub fn region_dynamic_coefficient(
    prof_a: &EdgeGapProfile,
    prof_b: &EdgeGapProfile,
    region: usize,
    cfg: &SegmentationConfig,
) -> f64 {
    let pairs: Vec<_> = paired_gaps(prof_a, prof_b, region, cfg).collect();
    let flags = consistency(&pairs, cfg);
    let total: f64 = pairs.iter().map(|(a, _)| a.gap).sum();
    if pairs.is_empty() || total <= 0.0 {
        return 0.0;
    }
    let bad: f64 = pairs
        .iter()
        .zip(&flags)
        .filter(|(_, &ok)| !ok)
        .fold(0.0, |s, ((a, _), _)| s + a.gap);
    (bad / total).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MaskState {
    Static = 0,
    Dynamic = 1,
    Invalid = 2,
}

/// Per-pixel static/dynamic classification of frame A.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MotionMask {
    width: usize,
    height: usize,
    states: Vec<MaskState>,
}

impl MotionMask {
    /// Everything with valid depth is static.
    pub fn from_depth(depth: &DepthImage) -> Self {
        MotionMask {
            width: depth.width(),
            height: depth.height(),
            states: depth
                .data()
                .iter()
                .map(|&d| if d > 0.0 { MaskState::Static } else { MaskState::Invalid })
                .collect(),
        }
    }

    pub fn from_states(width: usize, height: usize, states: Vec<MaskState>) -> Result<Self> {
        if states.len() != width * height {
            return Err(Error::InvalidArgument("mask size does not match dimensions".into()));
        }
        Ok(MotionMask { width, height, states })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn states(&self) -> &[MaskState] {
        &self.states
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> MaskState {
        self.states[y * self.width + x]
    }

    #[inline]
    pub fn is_static(&self, x: usize, y: usize) -> bool {
        self.get(x, y) == MaskState::Static
    }

    /// Marks a pixel dynamic; invalid pixels are left alone.
    #[inline]
    pub fn mark_dynamic(&mut self, index: usize) {
        if self.states[index] == MaskState::Static {
            self.states[index] = MaskState::Dynamic;
        }
    }

    pub fn count(&self, state: MaskState) -> usize {
        self.states.iter().filter(|&&s| s == state).count()
    }

    /// Fraction of all pixels whose state differs from `other`.
    pub fn change_fraction(&self, other: &MotionMask) -> f64 {
        if self.states.is_empty() {
            return 0.0;
        }
        let changed = self.states.iter().zip(&other.states).filter(|(a, b)| a != b).count();
        changed as f64 / self.states.len() as f64
    }

    /// Half-resolution mask; a coarse pixel is static only if all four of its
    /// children are.
    pub fn downsampled(&self) -> MotionMask {
        let (w, h) = (self.width / 2, self.height / 2);
        let mut states = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let children = [
                    self.get(2 * x, 2 * y),
                    self.get(2 * x + 1, 2 * y),
                    self.get(2 * x, 2 * y + 1),
                    self.get(2 * x + 1, 2 * y + 1),
                ];
                let state = if children.iter().all(|&s| s == MaskState::Static) {
                    MaskState::Static
                } else if children.contains(&MaskState::Dynamic) {
                    MaskState::Dynamic
                } else {
                    MaskState::Invalid
                };
                states.push(state);
            }
        }
        MotionMask { width: w, height: h, states }
    }

    /// Debug export: 0 = static, 128 = invalid, 255 = dynamic.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([match self.get(x as usize, y as usize) {
                MaskState::Static => 0,
                MaskState::Invalid => 128,
                MaskState::Dynamic => 255,
            }])
        });
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        img.write_to(&mut BufWriter::new(file), image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }
}

/// Output of [`pre_eliminate`].
#[derive(Debug, Clone, PartialEq)]
pub struct PreElimination {
    pub mask: MotionMask,
    /// Dynamic coefficient per region, in region-index order.
    pub coefficients: Vec<f64>,
    /// Regions whose coefficient exceeded the threshold.
    pub triggered: Vec<usize>,
    /// Cluster removed for each triggered region (`None` if undecidable).
    pub moving_clusters: Vec<Option<u16>>,
}

/// Whether no depth in B within the change window matches `target`.
fn depth_changed(depth_b: &DepthImage, (x, y): (usize, usize), target: f64, cfg: &SegmentationConfig) -> bool {
    let r = cfg.change_window;
    let (w, h) = (depth_b.width(), depth_b.height());
    for ny in y.saturating_sub(r)..=(y + r).min(h - 1) {
        for nx in x.saturating_sub(r)..=(x + r).min(w - 1) {
            let d = depth_b.get(nx, ny);
            if d > 0.0 && (d - target).abs() <= cfg.tau_abs {
                return false;
            }
        }
    }
    true
}

/// Decides which depth cluster moved across the inconsistent edges of a region.
///
/// A near-side pixel that became farther means the near object left it. A
/// far-side pixel that now shows the near object's depth means the near object
/// moved over it; one that became farther means the far object moved away.
/// Pixels that became nearer than before, at some other depth, are covered by
/// an object that was not there in frame A and say nothing about A's clusters.
fn moving_cluster(
    pairs: &[(&EdgeSample, f64)],
    flags: &[bool],
    depth_b: &DepthImage,
    components: &Components,
    cfg: &SegmentationConfig,
) -> Option<(u16, Option<u32>)> {
    // Weight per (cluster, component of the voting pixel).
    let mut votes: Vec<((u16, u32), f64)> = Vec::new();
    let mut vote = |cluster: u16, (x, y): (usize, usize), weight: f64| {
        let key = (cluster, components.id(x, y));
        match votes.iter_mut().find(|(k, _)| *k == key) {
            Some((_, w)) => *w += weight,
            None => votes.push((key, weight)),
        }
    };
    for ((s, _), &ok) in pairs.iter().zip(flags) {
        if ok {
            continue;
        }
        let near_now = depth_b.get(s.near_pixel.0, s.near_pixel.1);
        let far_now = depth_b.get(s.far_pixel.0, s.far_pixel.1);
        if depth_changed(depth_b, s.near_pixel, s.near_depth, cfg) {
            if near_now > s.near_depth {
                vote(s.near_cluster, s.near_pixel, s.gap);
            }
        } else if depth_changed(depth_b, s.far_pixel, s.far_depth, cfg) && far_now > 0.0 {
            if far_now > s.far_depth {
                vote(s.far_cluster, s.far_pixel, s.gap);
            } else if (far_now - s.near_depth).abs() <= cfg.tau_abs + cfg.tau_rel * s.near_depth {
                vote(s.near_cluster, s.near_pixel, s.gap);
            }
        }
    }
    let mut per_cluster: Vec<(u16, f64)> = Vec::new();
    for &((c, _), w) in &votes {
        match per_cluster.iter_mut().find(|(k, _)| *k == c) {
            Some((_, t)) => *t += w,
            None => per_cluster.push((c, w)),
        }
    }
    let by_weight = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1));
    let cluster = per_cluster
        .into_iter()
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(c, _)| c)?;
    let component = votes
        .iter()
        .filter(|((c, id), _)| *c == cluster && *id != NO_COMPONENT)
        .map(|((_, id), w)| (*w, *id))
        .max_by(by_weight)
        .map(|(_, id)| id);
    Some((cluster, component))
}

/// Removes moving objects from frame A using depth alone.
pub fn pre_eliminate(
    frame_a: &Frame,
    frame_b: &Frame,
    cmap_a: &ClusterMap,
    grid: &RegionGrid,
    cfg: &SegmentationConfig,
) -> Result<PreElimination> {
    let components = connected_components(cmap_a);
    pre_eliminate_with(frame_a, frame_b, cmap_a, &components, grid, cfg)
}

/// [`pre_eliminate`] with precomputed connected components of `cmap_a`.
pub fn pre_eliminate_with(
    frame_a: &Frame,
    frame_b: &Frame,
    cmap_a: &ClusterMap,
    components: &Components,
    grid: &RegionGrid,
    cfg: &SegmentationConfig,
) -> Result<PreElimination> {
    cfg.validate()?;
    if frame_a.width() != frame_b.width() || frame_a.height() != frame_b.height() {
        return Err(Error::InvalidArgument("frame dimensions differ".into()));
    }
    let prof_a = edge_gap_profile(&frame_a.depth, grid, cmap_a)?;
    let cmap_b = assign_to_centroids(&frame_b.depth, cmap_a.centroids())?;
    let prof_b = edge_gap_profile(&frame_b.depth, grid, &cmap_b)?;

    let mut mask = MotionMask::from_depth(&frame_a.depth);
    let width = frame_a.width();
    let mut coefficients = Vec::with_capacity(grid.len());
    let mut triggered = Vec::new();
    let mut moving_clusters = Vec::new();
    let mut removed = vec![false; components.len()];

    for region in 0..grid.len() {
        let pairs: Vec<_> = paired_gaps(&prof_a, &prof_b, region, cfg).collect();
        let coefficient = region_dynamic_coefficient(&prof_a, &prof_b, region, cfg);
        coefficients.push(coefficient);
        if coefficient <= cfg.dynamic_threshold {
            continue;
        }
        triggered.push(region);
        let flags = consistency(&pairs, cfg);
        let moved = moving_cluster(&pairs, &flags, &frame_b.depth, components, cfg);
        moving_clusters.push(moved.map(|(c, _)| c));
        let Some((cluster, voted)) = moved else { continue };

        // The moving object is the component its edges voted for; without a
        // localised vote fall back to the largest overlapping component.
        let (x0, y0, x1, y1) = grid.bounds(region);
        let mut largest: Option<u32> = voted;
        for y in y0..y1 {
            for x in x0..x1 {
                if cmap_a.label(x, y) != cluster {
                    continue;
                }
                mask.mark_dynamic(y * width + x);
                let id = components.id(x, y);
                if voted.is_some() || id == NO_COMPONENT {
                    continue;
                }
                let size = components.components()[id as usize].pixel_count;
                let better = match largest {
                    None => true,
                    Some(best) => {
                        let best_size = components.components()[best as usize].pixel_count;
                        size > best_size || (size == best_size && id < best)
                    }
                };
                if better {
                    largest = Some(id);
                }
            }
        }
        if let Some(id) = largest {
            removed[id as usize] = true;
        }
    }

    for (i, &id) in components.ids().iter().enumerate() {
        if id != NO_COMPONENT && removed[id as usize] {
            mask.mark_dynamic(i);
        }
    }

    Ok(PreElimination {
        mask,
        coefficients,
        triggered,
        moving_clusters,
    })
}
