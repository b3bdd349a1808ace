//! Semi-automatic annotation against a ground-truth map.
//!
//! Points derived from histogram peaks are compared with a dense map of the
//! real geometry and with two kinds of hand-placed boxes: glass regions `G`
//! around panes and larger reflection regions `R` behind them. A point inside
//! `G` is Glass; a point close to the map is Object; a point far from the map
//! but inside `R` is Ghost; anything else is Noise.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{FwlError, Result};
use crate::frame::{Dims, FwlFrame, LabelVolume, Peak, PeakClass, Point3, PointCloud};
use crate::geometry::Pose;
use crate::sensor::SensorConfig;
use crate::signal::detect_peaks;
use crate::spatial::KdTree;
use crate::synth::{Material, Scene};

pub const DEFAULT_TAU_M: f64 = 0.5;

/// A box with arbitrary orientation. Columns of `axes` are its local axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    pub center: Vector3<f64>,
    pub axes: Matrix3<f64>,
    pub half_extents: Vector3<f64>,
}

impl OrientedBox {
    /// Builds a box from two axes; the third is `u x v`.
    pub fn new(center: Vector3<f64>, u: Vector3<f64>, v: Vector3<f64>, half_extents: Vector3<f64>) -> Result<Self> {
        let u = u.try_normalize(1e-12).ok_or_else(|| FwlError::Domain("zero box axis".into()))?;
        let v = v.try_normalize(1e-12).ok_or_else(|| FwlError::Domain("zero box axis".into()))?;
        if u.dot(&v).abs() > 1e-6 {
            return Err(FwlError::Domain("box axes must be orthogonal".into()));
        }
        if half_extents.iter().any(|&e| !(e > 0.0)) {
            return Err(FwlError::Domain("box extents must be > 0".into()));
        }
        Ok(Self {
            center,
            axes: Matrix3::from_columns(&[u, v, u.cross(&v)]),
            half_extents,
        })
    }

    pub fn axis_aligned(min: Vector3<f64>, max: Vector3<f64>) -> Result<Self> {
        Self::new((min + max) / 2.0, Vector3::x(), Vector3::y(), (max - min) / 2.0)
    }

    /// Inclusive containment test in box coordinates.
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let local = self.axes.transpose() * (p - self.center);
        (0..3).all(|i| local[i].abs() <= self.half_extents[i])
    }

    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let mut out = [Vector3::zeros(); 8];
        for (i, c) in out.iter_mut().enumerate() {
            let s = Vector3::new(
                if i & 1 == 0 { -1.0 } else { 1.0 },
                if i & 2 == 0 { -1.0 } else { 1.0 },
                if i & 4 == 0 { -1.0 } else { 1.0 },
            );
            *c = self.center + self.axes * s.component_mul(&self.half_extents);
        }
        out
    }

    /// Separating-axis overlap test; touching boxes overlap.
    pub fn intersects(&self, other: &OrientedBox) -> bool {
        let mut axes: Vec<Vector3<f64>> = Vec::with_capacity(15);
        for i in 0..3 {
            axes.push(self.axes.column(i).into_owned());
            axes.push(other.axes.column(i).into_owned());
        }
        for i in 0..3 {
            for j in 0..3 {
                let c = self.axes.column(i).cross(&other.axes.column(j));
                if c.norm() > 1e-9 {
                    axes.push(c.normalize());
                }
            }
        }
        let d = other.center - self.center;
        axes.iter().all(|a| {
            let ra: f64 = (0..3).map(|i| self.half_extents[i] * self.axes.column(i).dot(a).abs()).sum();
            let rb: f64 = (0..3).map(|i| other.half_extents[i] * other.axes.column(i).dot(a).abs()).sum();
            d.dot(a).abs() <= ra + rb + 1e-12
        })
    }

    pub fn transformed(&self, pose: &Pose) -> OrientedBox {
        let rot = pose.rotation().to_rotation_matrix().into_inner();
        OrientedBox {
            center: pose.transform_point(&self.center),
            axes: rot * self.axes,
            half_extents: self.half_extents,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionKind {
    Glass,
    Reflection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub kind: RegionKind,
    /// Glass and reflection boxes with the same id belong together.
    pub pair_id: u32,
    pub bbox: OrientedBox,
}

/// Reference geometry used to label FWL points.
#[derive(Debug, Clone)]
pub struct GtMap {
    points: PointCloud,
    index: KdTree,
    pub glass_regions: Vec<OrientedBox>,
    pub reflection_regions: Vec<OrientedBox>,
    pub tau: f64,
    /// Applied to FWL points before comparison.
    pub alignment: Pose,
}

impl GtMap {
    pub fn new(points: PointCloud, regions: &[Region], tau: f64, alignment: Pose) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(FwlError::config("tau_m", "must be > 0"));
        }
        for g in regions.iter().filter(|r| r.kind == RegionKind::Glass) {
            for r in regions
                .iter()
                .filter(|r| r.kind == RegionKind::Reflection && r.pair_id == g.pair_id)
            {
                if !g.bbox.corners().iter().all(|c| grown(&r.bbox, 1e-9).contains(c)) {
                    return Err(FwlError::Domain(format!(
                        "reflection region {} does not enclose its glass region",
                        g.pair_id
                    )));
                }
            }
        }
        let pick = |k: RegionKind| regions.iter().filter(|r| r.kind == k).map(|r| r.bbox).collect();
        Ok(Self {
            index: KdTree::new(points.positions()),
            points,
            glass_regions: pick(RegionKind::Glass),
            reflection_regions: pick(RegionKind::Reflection),
            tau,
            alignment,
        })
    }

    pub fn points(&self) -> &PointCloud {
        &self.points
    }

    pub fn in_glass(&self, x: &Vector3<f64>) -> bool {
        self.glass_regions.iter().any(|b| b.contains(x))
    }

    pub fn in_reflection(&self, x: &Vector3<f64>) -> bool {
        self.reflection_regions.iter().any(|b| b.contains(x))
    }
}

fn grown(b: &OrientedBox, eps: f64) -> OrientedBox {
    OrientedBox {
        half_extents: b.half_extents.add_scalar(eps),
        ..*b
    }
}

/// Distance from `x` to the nearest map point.
pub fn nn_distance(x: &Vector3<f64>, map: &GtMap) -> Result<f64> {
    map.index
        .nearest(x)
        .map(|(_, d)| d)
        .ok_or_else(|| FwlError::Empty("ground-truth map has no points".into()))
}

/// Class of an already aligned point. An empty map counts as infinitely far.
pub fn classify_point(x: &Vector3<f64>, map: &GtMap) -> PeakClass {
    if map.in_glass(x) {
        return PeakClass::Glass;
    }
    let d = nn_distance(x, map).unwrap_or(f64::INFINITY);
    if d < map.tau {
        PeakClass::Object
    } else if d > map.tau && map.in_reflection(x) {
        PeakClass::Ghost
    } else {
        PeakClass::Noise
    }
}

/// Detects, localizes and labels every peak of an accumulated frame.
///
/// Points are placed with `map.alignment * frame.pose`. Returns peaks in
/// pixel-then-position order and their FWHM-expanded label volume.
pub fn annotate_frame(
    frame: &FwlFrame,
    threshold: f64,
    map: &GtMap,
    cfg: &SensorConfig,
) -> Result<(Vec<Peak>, LabelVolume)> {
    let dims = frame.dims();
    if dims.h != cfg.rows || dims.w != cfg.cols {
        return Err(FwlError::DimMismatch(format!(
            "frame {dims} does not match sensor raster {}x{}",
            cfg.rows, cfg.cols
        )));
    }
    let pose = map.alignment.compose(&frame.pose);
    let mut peaks = Vec::new();
    for h in 0..dims.h {
        for w in 0..dims.w {
            for mut p in detect_peaks(frame.waveform(h, w), threshold) {
                p.row = h;
                p.col = w;
                let mut original = p;
                original.position = frame.original_bin(p.position);
                let x = crate::frame::peak_to_point(&original, &pose, cfg)?;
                p.label = classify_point(&x.position, map);
                peaks.push(p);
            }
        }
    }
    let labels = expand_labels_fwhm(&peaks, dims);
    Ok((peaks, labels))
}

/// Paints each peak's class over `[p - w/2, p + w/2]` of its pixel.
///
/// Where supports overlap the peak with the smaller position wins. Noise
/// peaks paint nothing. A support narrower than one bin still marks the
/// nearest bin.
pub fn expand_labels_fwhm(peaks: &[Peak], dims: Dims) -> LabelVolume {
    let mut labels = LabelVolume::noise(dims);
    if dims.t == 0 {
        return labels;
    }
    let mut order: Vec<&Peak> = peaks
        .iter()
        .filter(|p| p.label != PeakClass::Noise && p.row < dims.h && p.col < dims.w)
        .collect();
    // Farthest first so nearer peaks overwrite.
    order.sort_by(|a, b| (a.row, a.col).cmp(&(b.row, b.col)).then(b.position.total_cmp(&a.position)));
    let last = (dims.t - 1) as f64;
    for p in order {
        let half = if p.width.is_finite() { p.width.max(0.0) / 2.0 } else { 0.0 };
        let lo = (p.position - half).ceil().max(0.0);
        let hi = (p.position + half).floor().min(last);
        let (lo, hi) = if lo <= hi {
            (lo as usize, hi as usize)
        } else {
            let c = p.position.round().clamp(0.0, last) as usize;
            (c, c)
        };
        for t in lo..=hi {
            labels.set(p.row, p.col, t, p.label);
        }
    }
    labels
}

// ---------------------------------------------------------------------------
// Maps from synthetic scenes

/// How to derive a ground-truth map from a scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapOptions {
    /// Grid spacing of sampled opaque surfaces.
    pub spacing: f64,
    /// Half thickness of glass boxes along the pane normal.
    pub glass_half_thickness: f64,
    /// Depth of reflection boxes behind the pane.
    pub reflection_depth: f64,
    /// Lateral growth of reflection boxes over the pane.
    pub reflection_margin: f64,
    pub tau: f64,
}

impl Default for MapOptions {
    fn default() -> Self {
        Self {
            spacing: 0.1,
            glass_half_thickness: 0.3,
            reflection_depth: 30.0,
            reflection_margin: 2.0,
            tau: DEFAULT_TAU_M,
        }
    }
}

/// Points on a regular grid over every opaque surface.
pub fn sample_opaque_surfaces(scene: &Scene, spacing: f64) -> Result<PointCloud> {
    if !(spacing > 0.0) {
        return Err(FwlError::config("spacing_m", "must be > 0"));
    }
    let mut pts = Vec::new();
    for s in scene.surfaces.iter().filter(|s| !s.material.is_glass()) {
        let nu = (2.0 * s.half_extents[0] / spacing).ceil() as usize;
        let nv = (2.0 * s.half_extents[1] / spacing).ceil() as usize;
        let v_axis = s.v_axis();
        for i in 0..=nu {
            let a = -s.half_extents[0] + 2.0 * s.half_extents[0] * i as f64 / nu.max(1) as f64;
            for j in 0..=nv {
                let b = -s.half_extents[1] + 2.0 * s.half_extents[1] * j as f64 / nv.max(1) as f64;
                let p = s.point + s.u_axis * a + v_axis * b;
                pts.push(Point3::at(p.x, p.y, p.z).labelled(PeakClass::Object));
            }
        }
    }
    Ok(PointCloud::new(pts))
}

/// One glass and one reflection region per pane.
///
/// The reflection box covers the pane's side facing away from its normal,
/// which is where mirrored returns appear when the normal faces the sensor.
pub fn scene_regions(scene: &Scene, opts: &MapOptions) -> Result<Vec<Region>> {
    let mut out = Vec::new();
    for (i, s) in scene.surfaces.iter().enumerate() {
        if !matches!(s.material, Material::Glass { .. }) {
            continue;
        }
        let v = s.v_axis();
        let g = OrientedBox::new(
            s.point,
            s.u_axis,
            v,
            Vector3::new(s.half_extents[0], s.half_extents[1], opts.glass_half_thickness),
        )?;
        let depth = opts.reflection_depth / 2.0 + opts.glass_half_thickness;
        let r = OrientedBox::new(
            s.point - s.normal * (opts.reflection_depth / 2.0),
            s.u_axis,
            v,
            Vector3::new(
                s.half_extents[0] + opts.reflection_margin,
                s.half_extents[1] + opts.reflection_margin,
                depth,
            ),
        )?;
        out.push(Region { kind: RegionKind::Glass, pair_id: i as u32, bbox: g });
        out.push(Region { kind: RegionKind::Reflection, pair_id: i as u32, bbox: r });
    }
    Ok(out)
}

pub fn map_from_scene(scene: &Scene, opts: &MapOptions) -> Result<GtMap> {
    GtMap::new(
        sample_opaque_surfaces(scene, opts.spacing)?,
        &scene_regions(scene, opts)?,
        opts.tau,
        Pose::identity(),
    )
}

// ---------------------------------------------------------------------------
// Region files
//
// One box per line: `kind pair_id cx cy cz ux uy uz vx vy vz hx hy hz`, where
// kind is `G` or `R`, (u, v) are the first two box axes and h the half
// extents along (u, v, u x v). Blank lines and `#` comments are ignored.

pub fn parse_regions(text: &str, path: &Path) -> Result<Vec<Region>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |reason: String| FwlError::format(path, format!("line {}: {reason}", lineno + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 14 {
            return Err(err(format!("expected 14 fields, found {}", fields.len())));
        }
        let kind = match fields[0] {
            "G" => RegionKind::Glass,
            "R" => RegionKind::Reflection,
            k => return Err(err(format!("unknown region kind `{k}`"))),
        };
        let pair_id: u32 = fields[1].parse().map_err(|_| err(format!("bad pair id `{}`", fields[1])))?;
        let mut nums = [0.0f64; 12];
        for (n, f) in nums.iter_mut().zip(&fields[2..]) {
            *n = f.parse().map_err(|_| err(format!("bad number `{f}`")))?;
        }
        let v3 = |i: usize| Vector3::new(nums[i], nums[i + 1], nums[i + 2]);
        let bbox = OrientedBox::new(v3(0), v3(3), v3(6), v3(9)).map_err(|e| err(e.to_string()))?;
        out.push(Region { kind, pair_id, bbox });
    }
    Ok(out)
}

pub fn format_regions(regions: &[Region]) -> String {
    let mut s = String::from("# kind pair cx cy cz ux uy uz vx vy vz hx hy hz\n");
    for r in regions {
        let b = &r.bbox;
        let u = b.axes.column(0);
        let v = b.axes.column(1);
        let k = match r.kind {
            RegionKind::Glass => "G",
            RegionKind::Reflection => "R",
        };
        s.push_str(&format!(
            "{k} {} {} {} {} {} {} {} {} {} {} {} {} {}\n",
            r.pair_id,
            b.center.x,
            b.center.y,
            b.center.z,
            u.x,
            u.y,
            u.z,
            v.x,
            v.y,
            v.z,
            b.half_extents.x,
            b.half_extents.y,
            b.half_extents.z
        ));
    }
    s
}

pub fn read_regions(path: &Path) -> Result<Vec<Region>> {
    parse_regions(&std::fs::read_to_string(path)?, path)
}

pub fn write_regions(path: &Path, regions: &[Region]) -> Result<()> {
    std::fs::write(path, format_regions(regions))?;
    Ok(())
}
