//! Depth k-means and connected-component labelling.

use std::collections::VecDeque;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imaging::DepthImage;

/// Label carried by pixels without valid depth.
pub const INVALID_LABEL: u16 = u16::MAX;

/// Upper bound applied to the cluster count derived from depth statistics.
pub const MAX_CLUSTERS: usize = 12;

const KMEANS_MAX_ITERS: usize = 50;
const KMEANS_SHIFT_TOL: f64 = 1e-4;

/// Summary statistics over the valid pixels of a depth image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthStats {
    pub d_max: f64,
    pub d_min: f64,
    /// Population standard deviation.
    pub d_sd: f64,
}

impl DepthStats {
    pub fn from_depth(depth: &DepthImage) -> Result<Self> {
        let valid: Vec<f64> = depth.data().iter().copied().filter(|&d| d > 0.0).collect();
        if valid.is_empty() {
            return Err(Error::EmptyDepth);
        }
        let n = valid.len() as f64;
        let mean = valid.iter().sum::<f64>() / n;
        let var = valid.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
        let (d_min, d_max) = valid
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &d| (lo.min(d), hi.max(d)));
        Ok(DepthStats {
            d_max,
            d_min,
            d_sd: var.sqrt(),
        })
    }
}

/// `⌊(d_max − d_min) / d_sd⌋` clamped to `[1, max_clusters]`.
pub fn cluster_count(stats: &DepthStats) -> usize {
    cluster_count_clamped(stats, MAX_CLUSTERS)
}

pub fn cluster_count_clamped(stats: &DepthStats, max_clusters: usize) -> usize {
    if !(stats.d_sd > 0.0) {
        return 1;
    }
    let raw = ((stats.d_max - stats.d_min) / stats.d_sd).floor();
    if !raw.is_finite() {
        return max_clusters.max(1);
    }
    (raw as usize).clamp(1, max_clusters.max(1))
}

/// Per-pixel depth-cluster labels with their centroid depths.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterMap {
    width: usize,
    height: usize,
    labels: Vec<u16>,
    centroids: Vec<f64>,
    inertia_history: Vec<f64>,
}

impl ClusterMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    #[inline]
    pub fn label(&self, x: usize, y: usize) -> u16 {
        self.labels[y * self.width + x]
    }

    /// Strictly increasing centroid depths; label `i` belongs to `centroids[i]`.
    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }

    pub fn n_cluster(&self) -> usize {
        self.centroids.len()
    }

    /// Inertia after each Lloyd assignment (empty for maps built by
    /// [`assign_to_centroids`]).
    pub fn inertia_history(&self) -> &[f64] {
        &self.inertia_history
    }

    /// Sum of squared distances from each valid depth to its centroid.
    pub fn inertia(&self, depth: &DepthImage) -> f64 {
        depth
            .data()
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l != INVALID_LABEL)
            .map(|(&d, &l)| (d - self.centroids[l as usize]).powi(2))
            .sum()
    }
}

/// 1-D k-means over the valid depths.
///
/// Centroids are seeded at the `(i + ½)/n` quantiles, then refined by Lloyd
/// iterations until no centroid moves more than 0.1 mm (at most 50 rounds).
/// Ties between two centroids go to the nearer-to-camera one.
pub fn kmeans_depth(depth: &DepthImage, n: usize) -> Result<ClusterMap> {
    if n == 0 {
        return Err(Error::InvalidArgument("cluster count must be at least 1".into()));
    }
    let mut sorted: Vec<f64> = depth.data().iter().copied().filter(|&d| d > 0.0).collect();
    if sorted.is_empty() {
        return Err(Error::EmptyDepth);
    }
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    let n = n.min(distinct.len());

    let quantile = |values: &[f64], i: usize| values[((i as f64 + 0.5) / n as f64 * values.len() as f64) as usize];
    let mut centroids: Vec<f64> = (0..n).map(|i| quantile(&sorted, i)).collect();
    if centroids.windows(2).any(|w| w[0] >= w[1]) {
        centroids = (0..n).map(|i| quantile(&distinct, i)).collect();
    }

    let mut inertia_history: Vec<f64> = Vec::new();
    for _ in 0..KMEANS_MAX_ITERS {
        let bounds = cluster_bounds(&sorted, &centroids);
        let inertia: f64 = bounds
            .windows(2)
            .zip(&centroids)
            .map(|(b, &c)| sorted[b[0]..b[1]].iter().map(|x| (x - c) * (x - c)).sum::<f64>())
            .sum();
        if let Some(&prev) = inertia_history.last() {
            debug_assert!(inertia <= prev + 1e-9 * prev.max(1.0), "k-means inertia increased");
        }
        inertia_history.push(inertia);

        let updated: Vec<f64> = bounds
            .windows(2)
            .filter(|b| b[1] > b[0])
            .map(|b| {
                let slice = &sorted[b[0]..b[1]];
                slice.iter().sum::<f64>() / slice.len() as f64
            })
            .collect();
        let converged = updated.len() == centroids.len()
            && updated
                .iter()
                .zip(&centroids)
                .all(|(a, b)| (a - b).abs() < KMEANS_SHIFT_TOL);
        centroids = updated;
        if converged {
            break;
        }
    }
    // Means of consecutive sorted ranges are non-decreasing; equal ones merge.
    centroids.dedup();

    let mut map = assign_to_centroids(depth, &centroids)?;
    map.inertia_history = inertia_history;
    Ok(map)
}

/// Start index of each cluster's range in `sorted`, plus a final `len`.
fn cluster_bounds(sorted: &[f64], centroids: &[f64]) -> Vec<usize> {
    let mut bounds = Vec::with_capacity(centroids.len() + 1);
    bounds.push(0);
    for w in centroids.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        bounds.push(sorted.partition_point(|&x| x <= mid));
    }
    bounds.push(sorted.len());
    bounds
}

/// Labels every valid pixel with its nearest centroid (ties to the lower one).
pub fn assign_to_centroids(depth: &DepthImage, centroids: &[f64]) -> Result<ClusterMap> {
    if centroids.is_empty() || centroids.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(
            "centroids must be non-empty and strictly increasing".into(),
        ));
    }
    let mids: Vec<f64> = centroids.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    let labels = depth
        .data()
        .iter()
        .map(|&d| {
            if d > 0.0 {
                mids.partition_point(|&m| m < d) as u16
            } else {
                INVALID_LABEL
            }
        })
        .collect();
    Ok(ClusterMap {
        width: depth.width(),
        height: depth.height(),
        labels,
        centroids: centroids.to_vec(),
        inertia_history: Vec::new(),
    })
}

/// Marks pixels outside any component.
pub const NO_COMPONENT: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Component {
    pub cluster: u16,
    pub pixel_count: usize,
}

/// 4-connected components of equally-labelled pixels, numbered in raster
/// order of their first pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Components {
    width: usize,
    height: usize,
    ids: Vec<u32>,
    components: Vec<Component>,
}

impl Components {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    #[inline]
    pub fn id(&self, x: usize, y: usize) -> u32 {
        self.ids[y * self.width + x]
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }
}

pub fn connected_components(cmap: &ClusterMap) -> Components {
    let (w, h) = (cmap.width, cmap.height);
    let mut ids = vec![NO_COMPONENT; w * h];
    let mut components = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        let cluster = cmap.labels[start];
        if cluster == INVALID_LABEL || ids[start] != NO_COMPONENT {
            continue;
        }
        let id = components.len() as u32;
        let mut count = 0;
        ids[start] = id;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            count += 1;
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if ids[j] == NO_COMPONENT && cmap.labels[j] == cluster {
                    ids[j] = id;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        components.push(Component {
            cluster,
            pixel_count: count,
        });
    }
    Components {
        width: w,
        height: h,
        ids,
        components,
    }
}

const PALETTE: [[u8; 3]; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [170, 110, 40],
];

/// Debug export: 8-bit indexed PNG; invalid pixels use the last (black) entry.
pub fn save_cluster_png(path: &Path, cmap: &ClusterMap) -> Result<()> {
    let invalid_index = PALETTE.len() as u8;
    let mut palette: Vec<u8> = PALETTE.iter().flatten().copied().collect();
    palette.extend_from_slice(&[0, 0, 0]);
    let pixels: Vec<u8> = cmap
        .labels
        .iter()
        .map(|&l| {
            if l == INVALID_LABEL {
                invalid_index
            } else {
                (l as usize % PALETTE.len()) as u8
            }
        })
        .collect();

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), cmap.width as u32, cmap.height as u32);
    encoder.set_color(png::ColorType::Indexed);
    encoder.set_depth(png::BitDepth::Eight);
    encoder.set_palette(palette);
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = encoder.write_header().map_err(to_io)?;
    writer.write_image_data(&pixels).map_err(to_io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::Image;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn depth(w: usize, h: usize, data: Vec<f64>) -> DepthImage {
        DepthImage::new(Image::new(w, h, data).unwrap()).unwrap()
    }

    #[test]
    fn cluster_count_examples() {
        let s = |d_max, d_min, d_sd| DepthStats { d_max, d_min, d_sd };
        assert_eq!(cluster_count(&s(5.0, 0.5, 0.9)), 5);
        assert_eq!(cluster_count(&s(2.0, 2.0, 0.0)), 1);
        // raw value (4.0 − 0.5) / 0.1 = 35, clamped.
        assert_eq!(((4.0f64 - 0.5) / 0.1).floor(), 35.0);
        assert_eq!(cluster_count(&s(4.0, 0.5, 0.1)), 12);
    }

    #[test]
    fn stats_use_population_sd() {
        let d = depth(4, 1, vec![1.0, 3.0, 0.0, 2.0]);
        let s = DepthStats::from_depth(&d).unwrap();
        assert_eq!((s.d_min, s.d_max), (1.0, 3.0));
        assert!((s.d_sd - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!(matches!(DepthStats::from_depth(&depth(2, 1, vec![0.0, 0.0])), Err(Error::EmptyDepth)));
    }

    #[test]
    fn two_plateaus_split_cleanly() {
        // 85 % far plateau, 15 % near plateau.
        let data: Vec<f64> = (0..400).map(|i| if i % 20 < 3 { 1.0 } else { 3.0 }).collect();
        let d = depth(20, 20, data.clone());
        let m = kmeans_depth(&d, 2).unwrap();
        assert_eq!(m.centroids(), &[1.0, 3.0]);
        for (l, v) in m.labels().iter().zip(&data) {
            assert_eq!(*l, if *v == 1.0 { 0 } else { 1 });
        }
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let d = depth(3, 1, vec![1.0, 2.0, 4.5]);
        let m = kmeans_depth(&d, 1).unwrap();
        assert_eq!(m.centroids(), &[2.5]);
    }

    #[test]
    fn n_reduced_to_distinct_values() {
        let d = depth(4, 1, vec![1.0, 1.0, 2.0, 0.0]);
        let m = kmeans_depth(&d, 5).unwrap();
        assert_eq!(m.centroids(), &[1.0, 2.0]);
        assert_eq!(m.labels()[3], INVALID_LABEL);
        assert!(matches!(kmeans_depth(&depth(1, 1, vec![0.0]), 2), Err(Error::EmptyDepth)));
    }

    #[test]
    fn ties_go_to_lower_centroid() {
        let m = assign_to_centroids(&depth(3, 1, vec![1.0, 2.0, 3.0]), &[1.0, 3.0]).unwrap();
        assert_eq!(m.labels(), &[0, 0, 1]);
    }

    #[test]
    fn kmeans_beats_random_assignments() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..200).map(|_| rng.random_range(0.5..6.0)).collect();
        let d = depth(20, 10, data.clone());
        let m = kmeans_depth(&d, 3).unwrap();
        let ours = m.inertia(&d);
        for _ in 0..1000 {
            let labels: Vec<usize> = (0..200).map(|_| rng.random_range(0..3)).collect();
            let mut cost = 0.0;
            for k in 0..3 {
                let members: Vec<f64> = data.iter().zip(&labels).filter(|(_, &l)| l == k).map(|(v, _)| *v).collect();
                if members.is_empty() {
                    continue;
                }
                let mean = members.iter().sum::<f64>() / members.len() as f64;
                cost += members.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
            }
            assert!(ours <= cost);
        }
    }

    #[test]
    fn inertia_never_increases_and_labels_are_nearest() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..3000)
            .map(|i| if i % 3 == 0 { rng.random_range(0.5..1.0) } else { rng.random_range(1.0..7.0) })
            .collect();
        let d = depth(60, 50, data.clone());
        let m = kmeans_depth(&d, 6).unwrap();
        for w in m.inertia_history().windows(2) {
            assert!(w[1] <= w[0] + 1e-9 * w[0]);
        }
        for (v, &l) in data.iter().zip(m.labels()) {
            let best = m.centroids().iter().map(|c| (v - c).abs()).fold(f64::INFINITY, f64::min);
            assert!(((v - m.centroids()[l as usize]).abs() - best).abs() < 1e-12);
        }
        assert!(m.centroids().windows(2).all(|w| w[0] < w[1]));
        assert_eq!(kmeans_depth(&d, 6).unwrap(), m);
    }

    fn map_from(w: usize, h: usize, labels: Vec<u16>) -> ClusterMap {
        let n = labels.iter().filter(|&&l| l != INVALID_LABEL).max().map_or(1, |&m| m as usize + 1);
        ClusterMap {
            width: w,
            height: h,
            labels,
            centroids: (0..n).map(|i| i as f64 + 1.0).collect(),
            inertia_history: vec![],
        }
    }

    #[test]
    fn components_examples() {
        let uniform = connected_components(&map_from(5, 4, vec![0; 20]));
        assert_eq!(uniform.len(), 1);
        assert_eq!(uniform.components()[0].pixel_count, 20);

        // Two cluster-0 blobs separated by a column of cluster 1.
        let labels: Vec<u16> = (0..15).map(|i| if i % 5 == 2 { 1 } else { 0 }).collect();
        let c = connected_components(&map_from(5, 3, labels));
        let zeros = c.components().iter().filter(|k| k.cluster == 0).count();
        assert_eq!(zeros, 2);
        assert_eq!(c.id(0, 0), 0);
        assert_eq!(c.id(2, 0), 1);
        assert_eq!(c.id(3, 0), 2);
    }

    /// Independent recursive flood fill used as an oracle.
    fn flood_count(labels: &[u16], w: usize, h: usize) -> usize {
        let mut seen = vec![false; w * h];
        let mut count = 0;
        fn fill(labels: &[u16], seen: &mut [bool], w: usize, h: usize, x: usize, y: usize, c: u16) {
            let i = y * w + x;
            if seen[i] || labels[i] != c {
                return;
            }
            seen[i] = true;
            if x > 0 {
                fill(labels, seen, w, h, x - 1, y, c);
            }
            if x + 1 < w {
                fill(labels, seen, w, h, x + 1, y, c);
            }
            if y > 0 {
                fill(labels, seen, w, h, x, y - 1, c);
            }
            if y + 1 < h {
                fill(labels, seen, w, h, x, y + 1, c);
            }
        }
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if !seen[i] && labels[i] != INVALID_LABEL {
                    count += 1;
                    fill(labels, &mut seen, w, h, x, y, labels[i]);
                }
            }
        }
        count
    }

    #[test]
    fn checkerboard_cells_are_separate_components() {
        let (w, h, cell) = (24, 18, 3);
        let labels: Vec<u16> = (0..w * h).map(|i| (((i % w) / cell + (i / w) / cell) % 2) as u16).collect();
        let c = connected_components(&map_from(w, h, labels.clone()));
        assert_eq!(c.len(), flood_count(&labels, w, h));
        assert_eq!(c.len(), (w / cell) * (h / cell));
    }

    #[test]
    fn components_partition_valid_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (w, h) = (30, 20);
        let labels: Vec<u16> = (0..w * h)
            .map(|_| if rng.random::<f64>() < 0.1 { INVALID_LABEL } else { rng.random_range(0..3) })
            .collect();
        let c = connected_components(&map_from(w, h, labels.clone()));
        let total: usize = c.components().iter().map(|k| k.pixel_count).sum();
        assert_eq!(total, labels.iter().filter(|&&l| l != INVALID_LABEL).count());
        for (i, &id) in c.ids().iter().enumerate() {
            assert_eq!(id == NO_COMPONENT, labels[i] == INVALID_LABEL);
            if id != NO_COMPONENT {
                assert_eq!(c.components()[id as usize].cluster, labels[i]);
            }
        }
        assert_eq!(c.len(), flood_count(&labels, w, h));
    }

    #[test]
    fn cluster_png_export() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        save_cluster_png(&p, &map_from(3, 2, vec![0, 1, INVALID_LABEL, 2, 0, 1])).unwrap();
        let img = image::open(&p).unwrap().to_rgb8();
        assert_eq!(img.get_pixel(2, 0).0, [0, 0, 0]);
        assert_eq!(img.get_pixel(0, 0).0, PALETTE[0]);
    }
}
