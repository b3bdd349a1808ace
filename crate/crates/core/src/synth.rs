//! Histogram synthesis from planar scenes.
//!
//! Rays are cast from the sensor through every pixel. Opaque surfaces end a
//! ray; glass panes add a weak surface echo, pass an attenuated ray on, and
//! mirror a second ray that produces a ghost when it lands on an opaque
//! surface. A ghost is placed along the original ray at the full unfolded
//! path length, which is exactly the mirror image of the real hit across the
//! glass plane. At most two bounces are followed.

use std::path::Path;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::annotate::expand_labels_fwhm;
use crate::error::{FwlError, Result};
use crate::frame::{Dims, FwlFrame, LabelVolume, Peak, PeakClass};
use crate::geometry::{Pose, Trajectory};
use crate::sensor::{pixel_to_direction, range_to_bin, SensorConfig};

/// FWHM of a Gaussian pulse in units of its standard deviation.
pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_3;

/// Rays closer than this to their origin do not count as hits.
const MIN_HIT_DISTANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Material {
    Opaque {
        reflectance: f64,
    },
    Glass {
        /// Specular (mirror) reflectance.
        surface_reflectance: f64,
        transmittance: f64,
        /// Energy the pane itself sends straight back to the sensor.
        echo_reflectance: f64,
    },
}

impl Material {
    pub fn glass(surface_reflectance: f64, transmittance: f64) -> Self {
        Material::Glass {
            surface_reflectance,
            transmittance,
            echo_reflectance: 0.1 * surface_reflectance,
        }
    }

    pub fn is_glass(&self) -> bool {
        matches!(self, Material::Glass { .. })
    }
}

/// A bounded planar rectangle.
#[derive(Debug, Clone, PartialEq)]
pub struct Surface {
    pub name: String,
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
    /// First in-plane axis; the second is `normal x u_axis`.
    pub u_axis: Vector3<f64>,
    pub half_extents: [f64; 2],
    pub material: Material,
}

impl Surface {
    /// A rectangle whose first in-plane axis is derived from the normal:
    /// horizontal (`z x normal`) unless the plane is horizontal, then `+x`.
    pub fn new(
        name: impl Into<String>,
        point: Vector3<f64>,
        normal: Vector3<f64>,
        half_extents: [f64; 2],
        material: Material,
    ) -> Result<Self> {
        let n = normal.try_normalize(1e-12).ok_or_else(|| FwlError::Domain("zero normal".into()))?;
        let u = Vector3::z().cross(&n);
        let u = if u.norm() < 1e-9 { Vector3::x() } else { u.normalize() };
        let s = Self {
            name: name.into(),
            point,
            normal: n,
            u_axis: u,
            half_extents,
            material,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn v_axis(&self) -> Vector3<f64> {
        self.normal.cross(&self.u_axis)
    }

    pub fn validate(&self) -> Result<()> {
        if ((self.normal.norm() - 1.0).abs() > 1e-9) || (self.u_axis.norm() - 1.0).abs() > 1e-9 {
            return Err(FwlError::config(&self.name, "normal and u_axis must be unit vectors"));
        }
        if self.normal.dot(&self.u_axis).abs() > 1e-9 {
            return Err(FwlError::config(&self.name, "u_axis must lie in the plane"));
        }
        if !(self.half_extents[0] > 0.0 && self.half_extents[1] > 0.0) {
            return Err(FwlError::config(&self.name, "half extents must be > 0"));
        }
        match self.material {
            Material::Opaque { reflectance } if !(reflectance > 0.0 && reflectance <= 1.0) => {
                Err(FwlError::config(&self.name, "reflectance must lie in (0, 1]"))
            }
            Material::Glass {
                surface_reflectance: r,
                transmittance: t,
                echo_reflectance: e,
            } if !((0.0..1.0).contains(&r) && t > 0.0 && t <= 1.0 && r + t <= 1.0 && (0.0..=1.0).contains(&e)) => {
                Err(FwlError::config(
                    &self.name,
                    "glass needs surface_reflectance in [0,1), transmittance in (0,1], their sum <= 1, echo in [0,1]",
                ))
            }
            _ => Ok(()),
        }
    }

    /// Distance along the ray to the rectangle, if it is hit.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let denom = self.normal.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let s = self.normal.dot(&(self.point - origin)) / denom;
        if !(s > MIN_HIT_DISTANCE) {
            return None;
        }
        let local = origin + dir * s - self.point;
        let within = local.dot(&self.u_axis).abs() <= self.half_extents[0]
            && local.dot(&self.v_axis()).abs() <= self.half_extents[1];
        within.then_some(s)
    }

    /// Reflection of a point across the surface's plane.
    pub fn mirror_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        p - self.normal * (2.0 * (p - self.point).dot(&self.normal))
    }

    /// Signed distance of a point from the plane, positive on the normal side.
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        (p - self.point).dot(&self.normal)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub surfaces: Vec<Surface>,
    /// Expected ambient counts per bin.
    pub ambient_rate: f64,
    pub amplitude_scale: f64,
    pub rng_seed: u64,
}

impl Scene {
    pub fn new(surfaces: Vec<Surface>) -> Self {
        Self {
            surfaces,
            ambient_rate: 0.0,
            amplitude_scale: 1000.0,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.surfaces {
            s.validate()?;
        }
        if !(self.ambient_rate >= 0.0) {
            return Err(FwlError::config("ambient_rate_per_bin", "must be >= 0"));
        }
        if !(self.amplitude_scale > 0.0) {
            return Err(FwlError::config("amplitude_scale", "must be > 0"));
        }
        Ok(())
    }

    fn hits(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, skip: Option<usize>) -> Vec<(f64, usize)> {
        let mut hits: Vec<(f64, usize)> = self
            .surfaces
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != skip)
            .filter_map(|(i, s)| s.intersect(origin, dir).map(|d| (d, i)))
            .collect();
        hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        hits
    }
}

/// One return the sensor receives for a ray.
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionReturn {
    /// Apparent one-way range along the emitted ray (half the round trip).
    pub path_length: f64,
    /// Product of the material factors along the path.
    pub energy_factor: f64,
    pub class: PeakClass,
    /// Indices of the surfaces involved, in path order.
    pub surface_chain: Vec<usize>,
}

impl EmissionReturn {
    /// Apparent 3D position along the emitted ray.
    pub fn apparent_point(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Vector3<f64> {
        origin + dir * self.path_length
    }
}

/// Casts one ray and lists every return it produces, nearest first.
pub fn trace_ray(scene: &Scene, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Vec<EmissionReturn> {
    let mut out = Vec::new();
    // Round-trip transmission through the panes crossed so far.
    let mut transmission = 1.0;
    for (s, idx) in scene.hits(origin, dir, None) {
        match scene.surfaces[idx].material {
            Material::Opaque { reflectance } => {
                out.push(EmissionReturn {
                    path_length: s,
                    energy_factor: transmission * reflectance,
                    class: PeakClass::Object,
                    surface_chain: vec![idx],
                });
                break;
            }
            Material::Glass {
                surface_reflectance,
                transmittance,
                echo_reflectance,
            } => {
                if echo_reflectance > 0.0 {
                    out.push(EmissionReturn {
                        path_length: s,
                        energy_factor: transmission * echo_reflectance,
                        class: PeakClass::Glass,
                        surface_chain: vec![idx],
                    });
                }
                if surface_reflectance > 0.0 {
                    let n = scene.surfaces[idx].normal;
                    let hit = origin + dir * s;
                    let reflected = dir - n * (2.0 * dir.dot(&n));
                    if let Some(&(s2, j)) = scene.hits(&hit, &reflected, Some(idx)).first() {
                        if let Material::Opaque { reflectance } = scene.surfaces[j].material {
                            out.push(EmissionReturn {
                                path_length: s + s2,
                                energy_factor: transmission * surface_reflectance * reflectance,
                                class: PeakClass::Ghost,
                                surface_chain: vec![idx, j],
                            });
                        }
                    }
                }
                transmission *= transmittance * transmittance;
            }
        }
    }
    out.sort_by(|a, b| a.path_length.total_cmp(&b.path_length));
    out
}

/// Peak amplitude of a return: `A0 * energy / range^2`.
pub fn return_amplitude(ret: &EmissionReturn, scene: &Scene) -> f64 {
    scene.amplitude_scale * ret.energy_factor / (ret.path_length * ret.path_length)
}

/// A histogram with the peaks planted into it.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedWaveform {
    pub values: Vec<f64>,
    /// `(index into the returns, center bin, amplitude)` of every planted pulse.
    pub planted: Vec<(usize, f64, f64)>,
    /// Returns beyond the last bin.
    pub dropped: usize,
}

/// Sums one Gaussian pulse per return and adds Poisson ambient counts.
pub fn render_waveform(
    returns: &[EmissionReturn],
    scene: &Scene,
    cfg: &SensorConfig,
    rng: &mut ChaCha8Rng,
) -> RenderedWaveform {
    let n = cfg.bins;
    let sigma = cfg.pulse_sigma_bins;
    let mut values = vec![0.0f64; n];
    let mut planted = Vec::new();
    let mut dropped = 0;
    let reach = (8.0 * sigma).ceil() as i64;
    for (i, ret) in returns.iter().enumerate() {
        let t0 = range_to_bin(ret.path_length, cfg);
        if !(t0 <= (n - 1) as f64) {
            dropped += 1;
            continue;
        }
        let a = return_amplitude(ret, scene);
        let lo = (t0.floor() as i64 - reach).max(0) as usize;
        let hi = ((t0.ceil() as i64 + reach) as usize).min(n - 1);
        for (t, v) in values.iter_mut().enumerate().take(hi + 1).skip(lo) {
            let d = t as f64 - t0;
            *v += a * (-d * d / (2.0 * sigma * sigma)).exp();
        }
        planted.push((i, t0, a));
    }
    if scene.ambient_rate > 0.0 {
        let poisson = Poisson::new(scene.ambient_rate).expect("rate checked positive");
        for v in values.iter_mut() {
            *v += poisson.sample(rng);
        }
    }
    RenderedWaveform {
        values,
        planted,
        dropped,
    }
}

/// RNG stream of one pixel of one frame, independent of render order.
pub fn pixel_rng(seed: u64, frame: u64, pixel: u64) -> ChaCha8Rng {
    let mut x = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [frame, pixel] {
        x = splitmix(x ^ splitmix(v.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    ChaCha8Rng::seed_from_u64(x)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Ground truth that comes with a synthesized return.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedReturn {
    pub peak: Peak,
    pub ret: EmissionReturn,
    /// World-frame origin and direction of the pixel's ray.
    pub origin: Vector3<f64>,
    pub dir: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthFrame {
    pub frame: FwlFrame,
    pub labels: LabelVolume,
    /// Ground-truth peaks, by pixel then position.
    pub peaks: Vec<Peak>,
    /// Same order as `peaks`.
    pub planted: Vec<PlantedReturn>,
    pub dropped: usize,
}

/// Renders one frame seen from `pose`.
pub fn synth_frame(scene: &Scene, pose: &Pose, cfg: &SensorConfig, frame_index: u64) -> Result<SynthFrame> {
    scene.validate()?;
    cfg.validate()?;
    let dims = Dims::new(cfg.rows, cfg.cols, cfg.bins);
    let mut frame = FwlFrame::zeros(dims)
        .with_pose(*pose)
        .with_id(format!("frame{frame_index:05}"));
    let width = FWHM_PER_SIGMA * cfg.pulse_sigma_bins;
    let origin = pose.translation();
    let mut planted = Vec::new();
    let mut dropped = 0;
    for row in 0..cfg.rows {
        for col in 0..cfg.cols {
            let dir = pose.rotation() * pixel_to_direction(row, col, cfg)?;
            let returns = trace_ray(scene, &origin, &dir);
            let mut rng = pixel_rng(scene.rng_seed, frame_index, (row * cfg.cols + col) as u64);
            let rendered = render_waveform(&returns, scene, cfg, &mut rng);
            dropped += rendered.dropped;
            frame.set_waveform(row, col, &rendered.values);
            for &(i, t0, a) in &rendered.planted {
                planted.push(PlantedReturn {
                    peak: Peak {
                        row,
                        col,
                        position: t0,
                        amplitude: a,
                        width,
                        label: returns[i].class,
                    },
                    ret: returns[i].clone(),
                    origin,
                    dir,
                });
            }
        }
    }
    let peaks: Vec<Peak> = planted.iter().map(|p| p.peak).collect();
    let labels = expand_labels_fwhm(&peaks, dims);
    Ok(SynthFrame {
        frame,
        labels,
        peaks,
        planted,
        dropped,
    })
}

/// Renders one frame per trajectory pose; frame `i` uses noise stream `i`.
pub fn synth_sequence(scene: &Scene, trajectory: &Trajectory, cfg: &SensorConfig) -> Result<Vec<SynthFrame>> {
    trajectory
        .poses()
        .iter()
        .enumerate()
        .map(|(i, pose)| synth_frame(scene, pose, cfg, i as u64))
        .collect()
}

// ---------------------------------------------------------------------------
// Scene files

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    #[serde(default)]
    ambient_rate_per_bin: f64,
    #[serde(default = "default_amplitude")]
    amplitude_scale: f64,
    #[serde(default)]
    rng_seed: u64,
    #[serde(default, rename = "surface")]
    surfaces: Vec<SurfaceFile>,
}

fn default_amplitude() -> f64 {
    1000.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SurfaceFile {
    name: String,
    kind: String,
    point_m: [f64; 3],
    normal: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    u_axis: Option<[f64; 3]>,
    half_extents_m: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reflectance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    surface_reflectance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    transmittance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    echo_reflectance: Option<f64>,
}

fn vec3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

/// Parses a scene description.
///
/// ```toml
/// ambient_rate_per_bin = 0.05
/// amplitude_scale = 1000.0
/// rng_seed = 7
///
/// [[surface]]
/// name = "pane"
/// kind = "glass"            # or "opaque"
/// point_m = [5.0, 0.0, 0.0]
/// normal = [-1.0, 0.0, 0.0]
/// half_extents_m = [4.0, 2.0]
/// surface_reflectance = 0.3
/// transmittance = 0.6
/// # echo_reflectance defaults to 0.1 x surface_reflectance
/// ```
pub fn parse_scene(text: &str, path: &Path) -> Result<Scene> {
    let file: SceneFile = toml::from_str(text).map_err(|e| FwlError::format(path, e.to_string()))?;
    let mut surfaces = Vec::with_capacity(file.surfaces.len());
    for s in file.surfaces {
        let missing = |f: &str| FwlError::format(path, format!("surface `{}` needs `{f}`", s.name));
        let material = match s.kind.as_str() {
            "opaque" => Material::Opaque {
                reflectance: s.reflectance.ok_or_else(|| missing("reflectance"))?,
            },
            "glass" => {
                let r = s.surface_reflectance.ok_or_else(|| missing("surface_reflectance"))?;
                Material::Glass {
                    surface_reflectance: r,
                    transmittance: s.transmittance.ok_or_else(|| missing("transmittance"))?,
                    echo_reflectance: s.echo_reflectance.unwrap_or(0.1 * r),
                }
            }
            other => return Err(FwlError::format(path, format!("unknown surface kind `{other}`"))),
        };
        let mut surface = Surface::new(s.name.clone(), vec3(s.point_m), vec3(s.normal), s.half_extents_m, material)
            .map_err(|e| FwlError::format(path, e.to_string()))?;
        if let Some(u) = s.u_axis {
            surface.u_axis = vec3(u).normalize();
            surface.validate().map_err(|e| FwlError::format(path, e.to_string()))?;
        }
        surfaces.push(surface);
    }
    let scene = Scene {
        surfaces,
        ambient_rate: file.ambient_rate_per_bin,
        amplitude_scale: file.amplitude_scale,
        rng_seed: file.rng_seed,
    };
    scene.validate().map_err(|e| FwlError::format(path, e.to_string()))?;
    Ok(scene)
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    parse_scene(&std::fs::read_to_string(path)?, path)
}

pub fn format_scene(scene: &Scene) -> String {
    let file = SceneFile {
        ambient_rate_per_bin: scene.ambient_rate,
        amplitude_scale: scene.amplitude_scale,
        rng_seed: scene.rng_seed,
        surfaces: scene
            .surfaces
            .iter()
            .map(|s| {
                let a = |v: Vector3<f64>| [v.x, v.y, v.z];
                let mut f = SurfaceFile {
                    name: s.name.clone(),
                    kind: String::new(),
                    point_m: a(s.point),
                    normal: a(s.normal),
                    u_axis: Some(a(s.u_axis)),
                    half_extents_m: s.half_extents,
                    reflectance: None,
                    surface_reflectance: None,
                    transmittance: None,
                    echo_reflectance: None,
                };
                match s.material {
                    Material::Opaque { reflectance } => {
                        f.kind = "opaque".into();
                        f.reflectance = Some(reflectance);
                    }
                    Material::Glass {
                        surface_reflectance,
                        transmittance,
                        echo_reflectance,
                    } => {
                        f.kind = "glass".into();
                        f.surface_reflectance = Some(surface_reflectance);
                        f.transmittance = Some(transmittance);
                        f.echo_reflectance = Some(echo_reflectance);
                    }
                }
                f
            })
            .collect(),
    };
    toml::to_string(&file).expect("scene serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::peak_to_point;
    use crate::sensor::bin_to_range;

    fn wall(x: f64, reflectance: f64) -> Surface {
        Surface::new(
            "wall",
            Vector3::new(x, 0.0, 0.0),
            Vector3::new(-1.0, 0.0, 0.0),
            [50.0, 50.0],
            Material::Opaque { reflectance },
        )
        .unwrap()
    }

    fn pane(x: f64, r: f64, t: f64) -> Surface {
        Surface::new("pane", Vector3::new(x, 0.0, 0.0), Vector3::new(-1.0, 0.0, 0.0), [50.0, 50.0], Material::glass(r, t))
            .unwrap()
    }

    /// Every plane/ray intersection, found without any early exit.
    fn all_intersections(scene: &Scene, o: &Vector3<f64>, d: &Vector3<f64>) -> Vec<(f64, usize)> {
        let mut v = Vec::new();
        for (i, s) in scene.surfaces.iter().enumerate() {
            let denom = s.normal.dot(d);
            if denom.abs() > 0.0 {
                let t = s.normal.dot(&(s.point - o)) / denom;
                let p = o + d * t;
                let l = p - s.point;
                if t > 0.0 && l.dot(&s.u_axis).abs() <= s.half_extents[0] && l.dot(&s.v_axis()).abs() <= s.half_extents[1] {
                    v.push((t, i));
                }
            }
        }
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    }

    #[test]
    fn direct_hit_single_wall() {
        let scene = Scene::new(vec![wall(10.0, 0.8)]);
        let r = trace_ray(&scene, &Vector3::zeros(), &Vector3::x());
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].class, PeakClass::Object);
        assert!((r[0].path_length - 10.0).abs() < 1e-12);
        assert_eq!(r[0].energy_factor, 0.8);
    }

    #[test]
    fn glass_then_wall_on_boresight() {
        let scene = Scene::new(vec![pane(5.0, 0.3, 0.6), wall(8.0, 0.5)]);
        let (o, d) = (Vector3::zeros(), Vector3::x());
        let r = trace_ray(&scene, &o, &d);
        let hits = all_intersections(&scene, &o, &d);
        assert_eq!(hits.len(), 2);
        // Mirror ray goes back along -x and leaves the scene.
        let mirror = all_intersections(&scene, &(o + d * 5.0), &(-d));
        assert!(mirror.iter().all(|&(_, i)| i == 0 || mirror.is_empty()));
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].class, PeakClass::Glass);
        assert!((r[0].path_length - hits[0].0).abs() < 1e-12);
        assert!((r[0].energy_factor - 0.03).abs() < 1e-15);
        assert_eq!(r[1].class, PeakClass::Object);
        assert!((r[1].path_length - hits[1].0).abs() < 1e-12);
        assert!((r[1].energy_factor - 0.36 * 0.5).abs() < 1e-15);
        assert!(r.iter().all(|x| x.class != PeakClass::Ghost));
    }

    #[test]
    fn ghost_is_mirror_image_across_glass() {
        // Pane x = 5 facing the sensor; a post at (3, 1, 0) is reachable only via the mirror.
        let post = Surface::new(
            "post",
            Vector3::new(3.0, 1.0, 0.0),
            Vector3::new(0.0, -1.0, 0.0),
            [0.5, 0.5],
            Material::Opaque { reflectance: 0.9 },
        )
        .unwrap();
        let glass = pane(5.0, 0.3, 0.6);
        let scene = Scene::new(vec![glass.clone(), post]);
        let origin = Vector3::new(0.0, 0.0, 0.0);
        // Aim at the point on the pane whose reflection reaches (3, 1, 0):
        // the mirror image of (3, 1, 0) is (7, 1, 0).
        let target = Vector3::new(7.0, 1.0, 0.0);
        let dir = (target - origin).normalize();
        let r = trace_ray(&scene, &origin, &dir);
        let ghost = r.iter().find(|x| x.class == PeakClass::Ghost).expect("ghost");
        let p = ghost.apparent_point(&origin, &dir);
        assert!((p - target).norm() < 1e-9, "{p:?}");
        assert!((glass.mirror_point(&p) - Vector3::new(3.0, 1.0, 0.0)).norm() < 1e-9);
        assert!((ghost.energy_factor - 0.27).abs() < 1e-15);
    }

    #[test]
    fn render_basic_cases() {
        let cfg = SensorConfig::with_raster(1, 1, 700);
        let scene = Scene::new(vec![]);
        let mut rng = pixel_rng(0, 0, 0);
        let w = render_waveform(&[], &scene, &cfg, &mut rng);
        assert!(w.values.iter().all(|&v| v == 0.0));

        let ret = EmissionReturn {
            path_length: bin_to_range(100.0, &cfg).unwrap(),
            energy_factor: 0.5,
            class: PeakClass::Object,
            surface_chain: vec![0],
        };
        let w = render_waveform(std::slice::from_ref(&ret), &scene, &cfg, &mut rng);
        let a = return_amplitude(&ret, &scene);
        let argmax = w.values.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        assert_eq!(argmax.0, 100);
        assert!((argmax.1 - a).abs() < 1e-6);

        let far = EmissionReturn { path_length: 200.0, ..ret };
        assert_eq!(render_waveform(&[far], &scene, &cfg, &mut rng).dropped, 1);
    }

    #[test]
    fn ambient_noise_moments() {
        let cfg = SensorConfig::with_raster(1, 1, 10_000);
        let scene = Scene {
            ambient_rate: 3.0,
            ..Scene::new(vec![])
        };
        let mut rng = pixel_rng(42, 0, 0);
        let w = render_waveform(&[], &scene, &cfg, &mut rng).values;
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
        assert!((mean - 3.0).abs() < 0.1, "{mean}");
        assert!((var - 3.0).abs() < 0.2, "{var}");
    }

    #[test]
    fn inverse_square_law() {
        let scene = Scene::new(vec![]);
        let r = |d: f64| EmissionReturn {
            path_length: d,
            energy_factor: 0.7,
            class: PeakClass::Object,
            surface_chain: vec![],
        };
        for d in [1.0, 3.3, 12.0] {
            let ratio = return_amplitude(&r(d), &scene) / return_amplitude(&r(2.0 * d), &scene);
            assert!((ratio - 4.0).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_scene_frame_is_all_noise() {
        let cfg = SensorConfig::with_raster(4, 4, 64);
        let sf = synth_frame(&Scene::new(vec![]), &Pose::identity(), &cfg, 0).unwrap();
        assert!(sf.frame.values().iter().all(|&v| v == 0.0));
        assert_eq!(sf.labels.count(PeakClass::Noise), 4 * 4 * 64);
        assert!(sf.peaks.is_empty());
    }

    #[test]
    fn glass_and_wall_frame_has_both_peaks_everywhere() {
        let cfg = SensorConfig {
            h_fov_deg: 30.0,
            v_fov_deg: 20.0,
            ..SensorConfig::with_raster(5, 5, 128)
        };
        let scene = Scene::new(vec![pane(5.0, 0.3, 0.6), wall(8.0, 0.5)]);
        let sf = synth_frame(&scene, &Pose::identity(), &cfg, 0).unwrap();
        for row in 0..5 {
            for col in 0..5 {
                let dir = pixel_to_direction(row, col, &cfg).unwrap();
                let oracle = trace_ray(&scene, &Vector3::zeros(), &dir);
                let here: Vec<&Peak> = sf.peaks.iter().filter(|p| p.row == row && p.col == col).collect();
                assert_eq!(here.len(), oracle.len());
                assert!(here.iter().any(|p| p.label == PeakClass::Glass));
                assert!(here.iter().any(|p| p.label == PeakClass::Object));
            }
        }
    }

    #[test]
    fn ghost_points_obey_mirror_law() {
        let cfg = SensorConfig::with_raster(16, 24, 128);
        let glass = Surface::new(
            "pane",
            Vector3::new(6.0, 0.0, 0.0),
            Vector3::new(-1.0, 0.3, 0.0),
            [6.0, 3.0],
            Material::glass(0.3, 0.6),
        )
        .unwrap();
        let side = Surface::new(
            "side",
            Vector3::new(2.0, -4.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            [6.0, 3.0],
            Material::Opaque { reflectance: 0.8 },
        )
        .unwrap();
        let scene = Scene::new(vec![glass.clone(), side.clone()]);
        let sf = synth_frame(&scene, &Pose::identity(), &cfg, 0).unwrap();
        let ghosts: Vec<&PlantedReturn> = sf.planted.iter().filter(|p| p.peak.label == PeakClass::Ghost).collect();
        assert!(!ghosts.is_empty());
        for g in ghosts {
            let p = peak_to_point(&g.peak, &sf.frame.pose, &cfg).unwrap().position;
            let real = glass.mirror_point(&p);
            // The mirrored point lies on the opaque surface's plane, inside its extents.
            assert!(side.signed_distance(&real).abs() < 1e-6, "{}", side.signed_distance(&real));
            let l = real - side.point;
            assert!(l.dot(&side.u_axis).abs() <= side.half_extents[0] + 1e-6);
        }
    }

    #[test]
    fn noise_free_runs_are_bit_identical_and_noisy_runs_seeded() {
        let cfg = SensorConfig::with_raster(6, 6, 96);
        let mut scene = Scene::new(vec![pane(5.0, 0.3, 0.6), wall(8.0, 0.5)]);
        let a = synth_frame(&scene, &Pose::identity(), &cfg, 3).unwrap();
        let b = synth_frame(&scene, &Pose::identity(), &cfg, 3).unwrap();
        assert_eq!(a, b);
        scene.ambient_rate = 0.5;
        let c = synth_frame(&scene, &Pose::identity(), &cfg, 3).unwrap();
        let d = synth_frame(&scene, &Pose::identity(), &cfg, 3).unwrap();
        let e = synth_frame(&scene, &Pose::identity(), &cfg, 4).unwrap();
        assert_eq!(c.frame, d.frame);
        assert_ne!(c.frame.values(), e.frame.values());
        assert_eq!(c.peaks, e.peaks);
    }

    #[test]
    fn raising_mirror_reflectance_raises_ghost_amplitude_only() {
        let cfg = SensorConfig::with_raster(16, 24, 128);
        let make = |r: f64| {
            let glass = Surface::new(
                "pane",
                Vector3::new(6.0, 0.0, 0.0),
                Vector3::new(-1.0, 0.3, 0.0),
                [6.0, 3.0],
                Material::Glass {
                    surface_reflectance: r,
                    transmittance: 0.6,
                    echo_reflectance: 0.02,
                },
            )
            .unwrap();
            let side = Surface::new(
                "side",
                Vector3::new(2.0, -4.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
                [6.0, 3.0],
                Material::Opaque { reflectance: 0.8 },
            )
            .unwrap();
            synth_frame(&Scene::new(vec![glass, side]), &Pose::identity(), &cfg, 0).unwrap()
        };
        let lo = make(0.2);
        let hi = make(0.35);
        assert_eq!(lo.peaks.len(), hi.peaks.len());
        let mut saw_ghost = false;
        for (a, b) in lo.peaks.iter().zip(&hi.peaks) {
            assert_eq!(a.position, b.position);
            if a.label == PeakClass::Ghost {
                saw_ghost = true;
                assert!(b.amplitude > a.amplitude);
            } else {
                assert_eq!(a.amplitude, b.amplitude);
            }
        }
        assert!(saw_ghost);
    }

    #[test]
    fn scene_file_round_trip() {
        let text = r#"
ambient_rate_per_bin = 0.05
amplitude_scale = 500.0
rng_seed = 9

[[surface]]
name = "pane"
kind = "glass"
point_m = [5.0, 0.0, 0.0]
normal = [-1.0, 0.0, 0.0]
half_extents_m = [4.0, 2.0]
surface_reflectance = 0.3
transmittance = 0.6

[[surface]]
name = "wall"
kind = "opaque"
point_m = [8.0, 0.0, 0.0]
normal = [-1.0, 0.0, 0.0]
half_extents_m = [4.0, 2.0]
reflectance = 0.5
"#;
        let scene = parse_scene(text, Path::new("s.scn")).unwrap();
        assert_eq!(scene.surfaces.len(), 2);
        assert!(matches!(
            scene.surfaces[0].material,
            Material::Glass { echo_reflectance, .. } if (echo_reflectance - 0.03).abs() < 1e-15
        ));
        let again = parse_scene(&format_scene(&scene), Path::new("s.scn")).unwrap();
        assert_eq!(again, scene);
        let bad = text.replace("transmittance = 0.6", "transmittance = 0.9");
        assert!(parse_scene(&bad, Path::new("s.scn")).is_err());
    }
}
