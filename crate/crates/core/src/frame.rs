//! Histogram volumes, peaks, labels and points.

use nalgebra::Vector3;

use crate::error::{FwlError, Result};
use crate::geometry::Pose;
use crate::sensor::{bin_to_range, pixel_to_direction, SensorConfig};

/// Class of a histogram peak or of a voxel.
///
/// `Undefined` is only ever produced by thresholded predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PeakClass {
    Object,
    Glass,
    Ghost,
    Noise,
    Undefined,
}

impl PeakClass {
    /// The four trainable classes, in model output order.
    pub const TRAINABLE: [PeakClass; 4] = [
        PeakClass::Object,
        PeakClass::Glass,
        PeakClass::Ghost,
        PeakClass::Noise,
    ];

    /// Byte code used by the label file format.
    pub fn code(self) -> u8 {
        match self {
            PeakClass::Object => 0,
            PeakClass::Glass => 1,
            PeakClass::Ghost => 2,
            PeakClass::Noise => 3,
            PeakClass::Undefined => 255,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => PeakClass::Object,
            1 => PeakClass::Glass,
            2 => PeakClass::Ghost,
            3 => PeakClass::Noise,
            255 => PeakClass::Undefined,
            _ => return None,
        })
    }

    /// Index into model class dimension; `None` for `Undefined`.
    pub fn index(self) -> Option<usize> {
        match self {
            PeakClass::Undefined => None,
            c => Some(c.code() as usize),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PeakClass::Object => "object",
            PeakClass::Glass => "glass",
            PeakClass::Ghost => "ghost",
            PeakClass::Noise => "noise",
            PeakClass::Undefined => "undefined",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s.trim().to_ascii_lowercase().as_str() {
            "object" => PeakClass::Object,
            "glass" => PeakClass::Glass,
            "ghost" => PeakClass::Ghost,
            "noise" => PeakClass::Noise,
            "undefined" => PeakClass::Undefined,
            _ => return None,
        })
    }
}

impl std::fmt::Display for PeakClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One return extracted from (or planted into) a pixel's histogram.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub row: usize,
    pub col: usize,
    /// Fractional bin index of the apex.
    pub position: f64,
    pub amplitude: f64,
    /// Full width at half maximum, in bins.
    pub width: f64,
    pub label: PeakClass,
}

/// Volume dimensions `(H, W, T)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub h: usize,
    pub w: usize,
    pub t: usize,
}

impl Dims {
    pub const fn new(h: usize, w: usize, t: usize) -> Self {
        Self { h, w, t }
    }

    pub fn len(&self) -> usize {
        self.h * self.w * self.t
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major `(h, w, t)` offset.
    #[inline]
    pub fn offset(&self, h: usize, w: usize, t: usize) -> usize {
        debug_assert!(h < self.h && w < self.w && t < self.t);
        (h * self.w + w) * self.t + t
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.h, self.w, self.t)
    }
}

pub(crate) fn check_index_map(map: &[usize], t: usize) -> Result<()> {
    if map.len() != t {
        return Err(FwlError::DimMismatch(format!(
            "index map has {} entries for {t} bins",
            map.len()
        )));
    }
    if map.windows(2).any(|w| w[1] <= w[0]) {
        return Err(FwlError::Domain("index map must be strictly increasing".into()));
    }
    Ok(())
}

/// An `H x W x T` intensity histogram volume.
#[derive(Debug, Clone, PartialEq)]
pub struct FwlFrame {
    dims: Dims,
    values: Vec<f32>,
    pub pose: Pose,
    pub frame_id: String,
    t_index_map: Option<Vec<usize>>,
}

impl FwlFrame {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            values: vec![0.0; dims.len()],
            pose: Pose::identity(),
            frame_id: String::new(),
            t_index_map: None,
        }
    }

    pub fn from_values(dims: Dims, values: Vec<f32>) -> Result<Self> {
        if values.len() != dims.len() {
            return Err(FwlError::DimMismatch(format!(
                "{} values for a {dims} volume",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(FwlError::Domain(format!(
                "intensities must be finite and non-negative, found {v}"
            )));
        }
        Ok(Self {
            dims,
            values,
            pose: Pose::identity(),
            frame_id: String::new(),
            t_index_map: None,
        })
    }

    pub fn with_pose(mut self, pose: Pose) -> Self {
        self.pose = pose;
        self
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.frame_id = id.into();
        self
    }

    pub fn with_index_map(mut self, map: Vec<usize>) -> Result<Self> {
        check_index_map(&map, self.dims.t)?;
        self.t_index_map = Some(map);
        Ok(self)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn t_index_map(&self) -> Option<&[usize]> {
        self.t_index_map.as_deref()
    }

    pub(crate) fn set_index_map_unchecked(&mut self, map: Option<Vec<usize>>) {
        self.t_index_map = map;
    }

    /// Original-bin coordinate of a (possibly fractional) bin of this volume.
    pub fn original_bin(&self, t: f64) -> f64 {
        match &self.t_index_map {
            None => t,
            Some(map) => interpolate_index(map, t),
        }
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, t: usize) -> f32 {
        self.values[self.dims.offset(h, w, t)]
    }

    #[inline]
    pub fn set(&mut self, h: usize, w: usize, t: usize, v: f32) {
        debug_assert!(v >= 0.0);
        let o = self.dims.offset(h, w, t);
        self.values[o] = v;
    }

    pub fn waveform(&self, h: usize, w: usize) -> &[f32] {
        let o = self.dims.offset(h, w, 0);
        &self.values[o..o + self.dims.t]
    }

    /// Overwrites one pixel's histogram; negative inputs are clamped to zero.
    pub fn set_waveform(&mut self, h: usize, w: usize, values: &[f64]) {
        assert_eq!(values.len(), self.dims.t);
        let o = self.dims.offset(h, w, 0);
        for (dst, &v) in self.values[o..o + self.dims.t].iter_mut().zip(values) {
            *dst = v.max(0.0) as f32;
        }
    }
}

/// Piecewise-linear lookup of a fractional index in an index map.
pub(crate) fn interpolate_index(map: &[usize], t: f64) -> f64 {
    let last = map.len() - 1;
    let t = t.clamp(0.0, last as f64);
    let k = (t.floor() as usize).min(last);
    if k == last {
        return map[last] as f64;
    }
    let f = t - k as f64;
    map[k] as f64 + f * (map[k + 1] as f64 - map[k] as f64)
}

/// Per-voxel class assignment aligned to a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    dims: Dims,
    labels: Vec<PeakClass>,
    /// For a downsampled volume: original bin of each retained T index.
    pub t_index_map: Option<Vec<usize>>,
    /// For a volume upsampled from a sparse grid: the original bins that carry
    /// predictions. All other bins are fill.
    pub sampled_bins: Option<Vec<usize>>,
}

impl LabelVolume {
    pub fn filled(dims: Dims, class: PeakClass) -> Self {
        Self {
            dims,
            labels: vec![class; dims.len()],
            t_index_map: None,
            sampled_bins: None,
        }
    }

    pub fn noise(dims: Dims) -> Self {
        Self::filled(dims, PeakClass::Noise)
    }

    pub fn from_labels(dims: Dims, labels: Vec<PeakClass>) -> Result<Self> {
        if labels.len() != dims.len() {
            return Err(FwlError::DimMismatch(format!(
                "{} labels for a {dims} volume",
                labels.len()
            )));
        }
        Ok(Self {
            dims,
            labels,
            t_index_map: None,
            sampled_bins: None,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn labels(&self) -> &[PeakClass] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, t: usize) -> PeakClass {
        self.labels[self.dims.offset(h, w, t)]
    }

    #[inline]
    pub fn set(&mut self, h: usize, w: usize, t: usize, c: PeakClass) {
        let o = self.dims.offset(h, w, t);
        self.labels[o] = c;
    }

    pub fn column(&self, h: usize, w: usize) -> &[PeakClass] {
        let o = self.dims.offset(h, w, 0);
        &self.labels[o..o + self.dims.t]
    }

    /// Label a peak at fractional bin `position` of pixel `(h, w)` takes.
    ///
    /// Volumes upsampled from a sparse grid answer with the nearest sampled
    /// bin (lower one on ties); dense volumes answer with the nearest bin.
    pub fn label_at(&self, h: usize, w: usize, position: f64) -> PeakClass {
        let t = match &self.sampled_bins {
            Some(bins) if !bins.is_empty() => nearest_sampled(bins, position),
            _ => (position.round().max(0.0) as usize).min(self.dims.t - 1),
        };
        self.get(h, w, t)
    }

    pub fn count(&self, class: PeakClass) -> usize {
        self.labels.iter().filter(|&&c| c == class).count()
    }
}

fn nearest_sampled(bins: &[usize], position: f64) -> usize {
    let idx = bins.partition_point(|&b| (b as f64) < position);
    match (idx.checked_sub(1), bins.get(idx)) {
        (Some(lo), Some(&hi)) => {
            let lo = bins[lo];
            if position - lo as f64 <= hi as f64 - position {
                lo
            } else {
                hi
            }
        }
        (Some(lo), None) => bins[lo],
        (None, Some(&hi)) => hi,
        (None, None) => unreachable!("bins is non-empty"),
    }
}

/// A 3D point derived from a histogram peak.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point3 {
    pub position: Vector3<f64>,
    pub row: usize,
    pub col: usize,
    /// Fractional bin in original sensor units.
    pub bin: f64,
    pub label: PeakClass,
}

impl Point3 {
    /// A bare point without histogram provenance.
    pub fn at(x: f64, y: f64, z: f64) -> Self {
        Self {
            position: Vector3::new(x, y, z),
            row: 0,
            col: 0,
            bin: 0.0,
            label: PeakClass::Undefined,
        }
    }

    pub fn labelled(mut self, label: PeakClass) -> Self {
        self.label = label;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.points.iter().map(|p| p.position).collect()
    }

    pub fn with_label(&self, label: PeakClass) -> PointCloud {
        PointCloud::new(self.points.iter().copied().filter(|p| p.label == label).collect())
    }
}

impl FromIterator<Point3> for PointCloud {
    fn from_iter<I: IntoIterator<Item = Point3>>(iter: I) -> Self {
        Self::new(iter.into_iter().collect())
    }
}

/// Converts a peak to a world point through the sensor pose.
///
/// `peak.position` must already be in original sensor bins.
pub fn peak_to_point(peak: &Peak, pose: &Pose, cfg: &SensorConfig) -> Result<Point3> {
    if !(peak.position >= 0.0) || peak.position > (cfg.bins - 1) as f64 {
        return Err(FwlError::Domain(format!(
            "peak position {} outside [0, {}]",
            peak.position,
            cfg.bins - 1
        )));
    }
    let range = bin_to_range(peak.position, cfg)?;
    let dir = pixel_to_direction(peak.row, peak.col, cfg)?;
    let local = dir * range;
    Ok(Point3 {
        position: pose.transform_point(&local),
        row: peak.row,
        col: peak.col,
        bin: peak.position,
        label: peak.label,
    })
}
