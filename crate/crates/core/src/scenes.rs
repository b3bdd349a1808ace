//! Procedural scenes for desk-scale training and evaluation.
//!
//! [`glass_room`] builds a closed room with one glass pane in front of the
//! sensor. Pane distance, tilt and the room walls vary with the seed, so the
//! reflected path sometimes ends far behind the sensor and sometimes on a
//! nearby side wall; the ghost's amplitude relative to the glass echo varies
//! accordingly.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::Pose;
use crate::sensor::SensorConfig;
use crate::signal::PreprocessSpec;
use crate::synth::{Material, Scene, Surface};

/// 32 x 32 pixels, 128 bins (19.2 m), 120 x 60 degrees.
pub fn toy_sensor() -> SensorConfig {
    let mut cfg = SensorConfig::with_raster(32, 32, 128);
    cfg.h_fov_deg = 120.0;
    cfg.v_fov_deg = 60.0;
    cfg
}

/// Keeps every second bin after the first, giving one 32 x 32 x 64 tile.
pub fn toy_preprocess() -> PreprocessSpec {
    PreprocessSpec {
        row_crop: 0,
        front_bin_crop: 1,
        target_t: 64,
        tile_hw: 32,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoomSpec {
    pub ambient_rate_per_bin: f64,
    pub amplitude_scale: f64,
    /// Nearest and farthest pane distance, meters.
    pub pane_distance_m: [f64; 2],
    /// Largest pane yaw away from facing the sensor.
    pub max_pane_yaw_deg: f64,
    /// Upper bound on the number of free-standing panels between sensor and pane.
    pub max_posts: usize,
}

impl Default for RoomSpec {
    fn default() -> Self {
        Self {
            ambient_rate_per_bin: 0.3,
            amplitude_scale: 4000.0,
            pane_distance_m: [2.5, 5.0],
            max_pane_yaw_deg: 40.0,
            max_posts: 3,
        }
    }
}

fn opaque(name: &str, point: Vector3<f64>, normal: Vector3<f64>, half: [f64; 2], reflectance: f64) -> Result<Surface> {
    Surface::new(name, point, normal, half, Material::Opaque { reflectance })
}

/// A walled room with one glass pane; the sensor sits at the origin looking along +x.
pub fn glass_room(seed: u64, spec: &RoomSpec) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5CE4_E000);
    let d = rng.random_range(spec.pane_distance_m[0]..spec.pane_distance_m[1]);
    let yaw = rng.random_range(-spec.max_pane_yaw_deg..=spec.max_pane_yaw_deg).to_radians();
    let y_off = rng.random_range(-1.0..1.0);
    let pane_half = [rng.random_range(1.5..3.0), rng.random_range(1.0..2.0)];
    let r = rng.random_range(0.2..0.45);
    let t = rng.random_range(0.5..(1.0 - r));

    let back = d + rng.random_range(2.0..6.0);
    let behind = -rng.random_range(1.5..6.0);
    let left = rng.random_range(2.5..6.0);
    let right = -rng.random_range(2.5..6.0);
    let floor = -rng.random_range(1.2..1.8);
    let ceiling = rng.random_range(1.8..3.0);
    let mut refl = || rng.random_range(0.3..0.9);
    let (span_x, mid_x) = ((back - behind) / 2.0, (back + behind) / 2.0);
    let (span_y, mid_y) = ((left - right) / 2.0, (left + right) / 2.0);
    let (span_z, mid_z) = ((ceiling - floor) / 2.0, (ceiling + floor) / 2.0);

    let mut surfaces = vec![
        Surface::new(
            "pane",
            Vector3::new(d, y_off, 0.0),
            Vector3::new(-yaw.cos(), -yaw.sin(), 0.0),
            pane_half,
            Material::glass(r, t),
        )?,
        opaque("back", Vector3::new(back, mid_y, mid_z), -Vector3::x(), [span_y, span_z], refl())?,
        opaque("behind", Vector3::new(behind, mid_y, mid_z), Vector3::x(), [span_y, span_z], refl())?,
        opaque("left", Vector3::new(mid_x, left, mid_z), -Vector3::y(), [span_x, span_z], refl())?,
        opaque("right", Vector3::new(mid_x, right, mid_z), Vector3::y(), [span_x, span_z], refl())?,
        opaque("floor", Vector3::new(mid_x, mid_y, floor), Vector3::z(), [span_x, span_y], refl())?,
        opaque("ceiling", Vector3::new(mid_x, mid_y, ceiling), -Vector3::z(), [span_x, span_y], refl())?,
    ];
    let posts = rng.random_range(0..=spec.max_posts);
    for i in 0..posts {
        let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let x = rng.random_range(0.5..(d - 0.3).max(0.6));
        let y = side * rng.random_range(1.0..2.4);
        let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let rho = rng.random_range(0.4..0.9);
        surfaces.push(opaque(
            &format!("post{i}"),
            Vector3::new(x, y, floor + 1.0),
            Vector3::new(a.cos(), a.sin(), 0.0),
            [0.3, 1.0],
            rho,
        )?);
    }
    let mut scene = Scene::new(surfaces);
    scene.ambient_rate = spec.ambient_rate_per_bin;
    scene.amplitude_scale = spec.amplitude_scale;
    scene.rng_seed = seed;
    Ok(scene)
}

/// `n` sensor poses jittered around the origin: up to 0.5 m and 15 degrees.
pub fn room_viewpoints(seed: u64, n: usize) -> Vec<Pose> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0F0F_1234);
    (0..n)
        .map(|i| {
            let t = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 0.0);
            Pose::from_yaw(rng.random_range(-15.0f64..15.0).to_radians(), t, i as f64)
        })
        .collect()
}

/// Pane 4 m ahead, a wall 3 m behind the sensor, a wall 9 m ahead; noise-free.
///
/// Every ghost is the mirror image of the rear wall, which only a sensor
/// seeing all around can observe directly. The pane is a low strip: a
/// reflected ray meets the rear wall at about 3.7 times its own elevation,
/// and a taller pane would put those wall points above [`ring_sensor`]'s
/// vertical field of view.
pub fn rear_wall_mirror_scene() -> Result<Scene> {
    let surfaces = vec![
        Surface::new(
            "pane",
            Vector3::new(4.0, 0.0, 0.0),
            -Vector3::x(),
            [3.0, 0.35],
            Material::glass(0.4, 0.5),
        )?,
        opaque("rear", Vector3::new(-3.0, 0.0, 0.0), Vector3::x(), [8.0, 4.0], 0.8)?,
        opaque("front", Vector3::new(9.0, 0.0, 0.0), -Vector3::x(), [8.0, 4.0], 0.6)?,
    ];
    Ok(Scene::new(surfaces))
}

/// Sensor for [`rear_wall_mirror_scene`]: 1 degree columns over `h_fov_deg`, 32 rows over 40 degrees.
pub fn ring_sensor(h_fov_deg: f64) -> SensorConfig {
    let cols = h_fov_deg.round() as usize + 1;
    let mut cfg = SensorConfig::with_raster(32, cols, 128);
    cfg.h_fov_deg = h_fov_deg;
    cfg.v_fov_deg = 40.0;
    cfg
}
