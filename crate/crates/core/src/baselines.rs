//! Classical comparison methods: return-mode peak selection, point-cloud
//! filters, mirror-symmetry ghost detection and a rule-based waveform
//! classifier.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::annotate::expand_labels_fwhm;
use crate::error::{FwlError, Result};
use crate::frame::{peak_to_point, FwlFrame, LabelVolume, Peak, PeakClass, Point3, PointCloud};
use crate::sensor::SensorConfig;
use crate::signal::{detect_peaks, select_strongest};
use crate::spatial::KdTree;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatisticalSpec {
    pub neighbors: usize,
    pub std_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadiusSpec {
    pub min_points: usize,
    pub radius_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSpec {
    pub statistical: StatisticalSpec,
    pub radius: RadiusSpec,
    pub voxel_size_m: f64,
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self {
            statistical: StatisticalSpec {
                neighbors: 20,
                std_ratio: 2.0,
            },
            radius: RadiusSpec {
                min_points: 50,
                radius_m: 0.5,
            },
            voxel_size_m: 1.0,
        }
    }
}

impl FilterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.statistical.neighbors == 0 || !(self.statistical.std_ratio > 0.0) {
            return Err(FwlError::config("statistical", "neighbors and std_ratio must be > 0"));
        }
        if self.radius.min_points == 0 || !(self.radius.radius_m > 0.0) {
            return Err(FwlError::config("radius", "min_points and radius_m must be > 0"));
        }
        if !(self.voxel_size_m > 0.0) {
            return Err(FwlError::config("voxel_size_m", "must be > 0"));
        }
        Ok(())
    }
}

/// Mean distance of every point to its `k` nearest other points.
pub fn mean_knn_distances(cloud: &PointCloud, k: usize) -> Vec<f64> {
    let tree = KdTree::new(cloud.positions());
    (0..cloud.len())
        .map(|i| {
            let d = tree.knn_distances(&cloud.points[i].position, k, Some(i));
            d.iter().sum::<f64>() / d.len() as f64
        })
        .collect()
}

/// Drops points whose mean neighbour distance exceeds `mean + std_ratio * std`
/// of that statistic over the cloud (sample standard deviation).
pub fn statistical_outlier_filter(cloud: &PointCloud, spec: &StatisticalSpec) -> Result<PointCloud> {
    if cloud.len() <= spec.neighbors {
        return Err(FwlError::Empty(format!(
            "statistical filter needs more than {} points, got {}",
            spec.neighbors,
            cloud.len()
        )));
    }
    let stat = mean_knn_distances(cloud, spec.neighbors);
    let limit = outlier_limit(&stat, spec.std_ratio);
    Ok(cloud
        .points
        .iter()
        .zip(&stat)
        .filter(|(_, &s)| s <= limit)
        .map(|(p, _)| *p)
        .collect())
}

pub(crate) fn outlier_limit(stat: &[f64], std_ratio: f64) -> f64 {
    let n = stat.len() as f64;
    let mean = stat.iter().sum::<f64>() / n;
    let var = stat.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0);
    mean + std_ratio * var.sqrt()
}

/// Keeps points with at least `min_points` others within `radius_m`.
pub fn radius_outlier_filter(cloud: &PointCloud, spec: &RadiusSpec) -> PointCloud {
    let tree = KdTree::new(cloud.positions());
    cloud
        .points
        .iter()
        .enumerate()
        .filter(|(i, p)| tree.count_within(&p.position, spec.radius_m, Some(*i)) >= spec.min_points)
        .map(|(_, p)| *p)
        .collect()
}

/// Integer voxel coordinates of a point.
pub fn voxel_key(p: &Vector3<f64>, size: f64) -> [i64; 3] {
    [
        (p.x / size).floor() as i64,
        (p.y / size).floor() as i64,
        (p.z / size).floor() as i64,
    ]
}

/// One centroid per occupied voxel, ordered by voxel key.
///
/// Each centroid takes the majority label of its members; a tie gives
/// Undefined.
pub fn voxel_downsample(cloud: &PointCloud, size: f64) -> Result<PointCloud> {
    if !(size > 0.0) {
        return Err(FwlError::config("voxel_size_m", "must be > 0"));
    }
    let mut cells: BTreeMap<[i64; 3], (Vector3<f64>, usize, [usize; 5])> = BTreeMap::new();
    for p in &cloud.points {
        let e = cells
            .entry(voxel_key(&p.position, size))
            .or_insert((Vector3::zeros(), 0, [0; 5]));
        e.0 += p.position;
        e.1 += 1;
        e.2[label_slot(p.label)] += 1;
    }
    Ok(cells
        .into_values()
        .map(|(sum, n, votes)| {
            let c = sum / n as f64;
            Point3::at(c.x, c.y, c.z).labelled(majority(&votes))
        })
        .collect())
}

fn label_slot(c: PeakClass) -> usize {
    c.index().unwrap_or(4)
}

fn majority(votes: &[usize; 5]) -> PeakClass {
    let best = *votes.iter().max().unwrap_or(&0);
    let winners: Vec<usize> = (0..5).filter(|&i| votes[i] == best).collect();
    match winners.as_slice() {
        [i] if *i < 4 => PeakClass::TRAINABLE[*i],
        _ => PeakClass::Undefined,
    }
}

/// A glass plane whose normal points toward the sensor side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlassPlane {
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
}

impl GlassPlane {
    pub fn new(point: Vector3<f64>, normal: Vector3<f64>) -> Result<Self> {
        let normal = normal
            .try_normalize(1e-12)
            .ok_or_else(|| FwlError::Domain("zero plane normal".into()))?;
        Ok(Self { point, normal })
    }

    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        (p - self.point).dot(&self.normal)
    }

    pub fn mirror(&self, p: &Vector3<f64>) -> Vector3<f64> {
        p - self.normal * (2.0 * self.signed_distance(p))
    }
}

/// Flags a point beyond some glass plane whose mirror image has a cloud
/// point within `eps`. Planes are unbounded.
pub fn mirror_symmetry_ghost_detect(cloud: &PointCloud, planes: &[GlassPlane], eps: f64) -> Vec<bool> {
    if planes.is_empty() {
        return vec![false; cloud.len()];
    }
    let tree = KdTree::new(cloud.positions());
    cloud
        .points
        .iter()
        .map(|p| {
            planes.iter().any(|pl| {
                pl.signed_distance(&p.position) < 0.0 && tree.any_within(&pl.mirror(&p.position), eps)
            })
        })
        .collect()
}

/// Labels peaks by relative amplitude alone.
///
/// When a pixel's first peak is stronger than `glass_amp_ratio` times the
/// strongest later peak, the first is Glass and every later one Ghost;
/// otherwise all its peaks are Object. Returns the labelled peaks and their
/// FWHM-expanded volume.
pub fn heuristic_waveform_classifier(
    frame: &FwlFrame,
    glass_amp_ratio: f64,
    threshold: f64,
) -> (Vec<Peak>, LabelVolume) {
    let dims = frame.dims();
    let mut out = Vec::new();
    for h in 0..dims.h {
        for w in 0..dims.w {
            let mut peaks = detect_peaks(frame.waveform(h, w), threshold);
            let later_max = peaks.iter().skip(1).map(|p| p.amplitude).fold(f64::NEG_INFINITY, f64::max);
            let glass = peaks.len() > 1 && peaks[0].amplitude > glass_amp_ratio * later_max;
            for (i, p) in peaks.iter_mut().enumerate() {
                p.row = h;
                p.col = w;
                p.label = match (glass, i) {
                    (true, 0) => PeakClass::Glass,
                    (true, _) => PeakClass::Ghost,
                    (false, _) => PeakClass::Object,
                };
            }
            out.extend(peaks);
        }
    }
    let labels = expand_labels_fwhm(&out, dims);
    (out, labels)
}

/// Point cloud keeping the `k` strongest peaks of every pixel (Dual-Peak:
/// `k = 2`, Multi-Peak: `k = 3`).
pub fn strongest_peaks_cloud(frame: &FwlFrame, k: usize, threshold: f64, cfg: &SensorConfig) -> Result<PointCloud> {
    let dims = frame.dims();
    let mut pts = Vec::new();
    for h in 0..dims.h {
        for w in 0..dims.w {
            for mut p in select_strongest(frame.waveform(h, w), k, threshold) {
                p.row = h;
                p.col = w;
                p.position = frame.original_bin(p.position);
                pts.push(peak_to_point(&p, &frame.pose, cfg)?);
            }
        }
    }
    Ok(PointCloud::new(pts))
}
