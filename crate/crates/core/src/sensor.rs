//! Sensor model: raster geometry and time-of-flight conversions.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{FwlError, Result};

/// Speed of light used for all time-of-flight conversions (m/s).
pub const SPEED_OF_LIGHT: f64 = 2.998e8;

/// Raster rows of the reference sensor.
pub const DEFAULT_ROWS: usize = 512;
/// Raster columns of the reference sensor.
pub const DEFAULT_COLS: usize = 400;
/// Temporal bins per histogram of the reference sensor.
pub const DEFAULT_BINS: usize = 700;
/// Duration of one temporal bin (s).
pub const DEFAULT_BIN_DURATION: f64 = 1e-9;
/// Nominal maximum range of the reference sensor (m).
pub const DEFAULT_MAX_RANGE: f64 = 105.0;

/// Geometry and timing of a full-waveform sensor.
///
/// Pixels form an equiangular grid: column 0 looks furthest left (positive
/// azimuth), row 0 looks furthest up (positive elevation), and the sensor
/// boresight is the local +x axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorConfig {
    pub rows: usize,
    pub cols: usize,
    pub bins: usize,
    /// Seconds per bin.
    pub bin_duration_s: f64,
    /// Meters; must agree with `bins * bin_duration * c / 2` within 1%.
    pub max_range_m: f64,
    pub v_fov_deg: f64,
    pub h_fov_deg: f64,
    /// Standard deviation of the emitted pulse, in bins.
    pub pulse_sigma_bins: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            rows: DEFAULT_ROWS,
            cols: DEFAULT_COLS,
            bins: DEFAULT_BINS,
            bin_duration_s: DEFAULT_BIN_DURATION,
            max_range_m: DEFAULT_MAX_RANGE,
            v_fov_deg: 70.0,
            h_fov_deg: 120.0,
            pulse_sigma_bins: 2.0,
        }
    }
}

impl SensorConfig {
    /// A sensor with the given raster and bin count; max range follows from timing.
    pub fn with_raster(rows: usize, cols: usize, bins: usize) -> Self {
        let mut cfg = Self {
            rows,
            cols,
            bins,
            ..Self::default()
        };
        cfg.max_range_m = cfg.unambiguous_range();
        cfg
    }

    /// Range covered by all bins, `bins * bin_duration * c / 2`.
    pub fn unambiguous_range(&self) -> f64 {
        self.bins as f64 * self.bin_duration_s * SPEED_OF_LIGHT / 2.0
    }

    /// One-way range covered by a single bin.
    pub fn bin_width_m(&self) -> f64 {
        self.bin_duration_s * SPEED_OF_LIGHT / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.bins == 0 {
            return Err(FwlError::config("rows/cols/bins", "must all be >= 1"));
        }
        if !(self.bin_duration_s > 0.0) {
            return Err(FwlError::config("bin_duration_s", "must be > 0"));
        }
        let nominal = self.unambiguous_range();
        if ((nominal - self.max_range_m) / self.max_range_m).abs() > 0.01 || !(self.max_range_m > 0.0) {
            return Err(FwlError::config(
                "max_range_m",
                format!(
                    "{} m disagrees with bins * bin_duration * c / 2 = {nominal:.3} m by more than 1%",
                    self.max_range_m
                ),
            ));
        }
        if !(self.v_fov_deg > 0.0 && self.v_fov_deg < 180.0) {
            return Err(FwlError::config("v_fov_deg", "must lie in (0, 180) degrees"));
        }
        // A spinning sensor may cover the full circle.
        if !(self.h_fov_deg > 0.0 && self.h_fov_deg <= 360.0) {
            return Err(FwlError::config("h_fov_deg", "must lie in (0, 360] degrees"));
        }
        if !(self.pulse_sigma_bins > 0.0) {
            return Err(FwlError::config("pulse_sigma_bins", "must be > 0"));
        }
        Ok(())
    }

    /// Row-major pixel count.
    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }
}

/// Converts a fractional bin index to one-way range in meters.
pub fn bin_to_range(t: f64, cfg: &SensorConfig) -> Result<f64> {
    if !(0.0..=cfg.bins as f64).contains(&t) {
        return Err(FwlError::Domain(format!(
            "bin {t} outside [0, {}]",
            cfg.bins
        )));
    }
    Ok(t * SPEED_OF_LIGHT * cfg.bin_duration_s / 2.0)
}

/// Inverse of [`bin_to_range`]; does not check the result against the bin count.
pub fn range_to_bin(range_m: f64, cfg: &SensorConfig) -> f64 {
    2.0 * range_m / (SPEED_OF_LIGHT * cfg.bin_duration_s)
}

/// Azimuth and elevation (radians) of a pixel's line of sight.
pub fn pixel_angles(row: usize, col: usize, cfg: &SensorConfig) -> Result<(f64, f64)> {
    if row >= cfg.rows || col >= cfg.cols {
        return Err(FwlError::Domain(format!(
            "pixel ({row}, {col}) outside {}x{} raster",
            cfg.rows, cfg.cols
        )));
    }
    let frac = |i: usize, n: usize| {
        if n == 1 {
            0.0
        } else {
            0.5 - i as f64 / (n - 1) as f64
        }
    };
    let az = frac(col, cfg.cols) * cfg.h_fov_deg.to_radians();
    let el = frac(row, cfg.rows) * cfg.v_fov_deg.to_radians();
    Ok((az, el))
}

/// Unit line-of-sight vector of a pixel in the sensor frame.
pub fn pixel_to_direction(row: usize, col: usize, cfg: &SensorConfig) -> Result<Vector3<f64>> {
    let (az, el) = pixel_angles(row, col, cfg)?;
    Ok(Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_sensor_is_valid_and_reaches_105m() {
        let cfg = SensorConfig::default();
        cfg.validate().unwrap();
        let r = bin_to_range(700.0, &cfg).unwrap();
        assert!((r - 105.0).abs() / 105.0 < 0.01, "{r}");
    }

    #[test]
    fn bin_to_range_values() {
        let cfg = SensorConfig::default();
        assert_eq!(bin_to_range(0.0, &cfg).unwrap(), 0.0);
        let r = bin_to_range(100.0, &cfg).unwrap();
        assert!((r - 100.0 * 2.998e8 * 1e-9 / 2.0).abs() < 1e-12);
        assert!((r - 14.99).abs() < 1e-9);
        assert!(bin_to_range(-0.1, &cfg).is_err());
        assert!(bin_to_range(700.5, &cfg).is_err());
    }

    #[test]
    fn mismatched_max_range_rejected() {
        let cfg = SensorConfig {
            max_range_m: 90.0,
            ..SensorConfig::default()
        };
        assert!(cfg.validate().is_err());
        for (h, v) in [(361.0, 70.0), (0.0, 70.0), (120.0, 180.0)] {
            let cfg = SensorConfig {
                h_fov_deg: h,
                v_fov_deg: v,
                ..SensorConfig::default()
            };
            assert!(cfg.validate().is_err(), "{h} x {v}");
        }
        let ring = SensorConfig {
            h_fov_deg: 360.0,
            ..SensorConfig::default()
        };
        ring.validate().unwrap();
    }

    #[test]
    fn center_and_corner_directions() {
        let cfg = SensorConfig::with_raster(5, 7, 100);
        let d = pixel_to_direction(2, 3, &cfg).unwrap();
        assert!((d - Vector3::x()).norm() < 1e-12);
        let (az, el) = pixel_angles(0, 0, &cfg).unwrap();
        assert!((az - 60f64.to_radians()).abs() < 1e-12);
        assert!((el - 35f64.to_radians()).abs() < 1e-12);
        let (az, el) = pixel_angles(4, 6, &cfg).unwrap();
        assert!((az + 60f64.to_radians()).abs() < 1e-12);
        assert!((el + 35f64.to_radians()).abs() < 1e-12);
        assert!(pixel_to_direction(5, 0, &cfg).is_err());
    }

    #[test]
    fn mirrored_pixels_are_symmetric_about_boresight() {
        let cfg = SensorConfig::with_raster(6, 9, 100);
        for r in 0..cfg.rows {
            for c in 0..cfg.cols {
                let a = pixel_to_direction(r, c, &cfg).unwrap();
                let b = pixel_to_direction(cfg.rows - 1 - r, cfg.cols - 1 - c, &cfg).unwrap();
                assert!((a.norm() - 1.0).abs() < 1e-12);
                assert!((a.x - b.x).abs() < 1e-12);
                assert!((a.y + b.y).abs() < 1e-12);
                assert!((a.z + b.z).abs() < 1e-12);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn range_round_trip(t in 0.0f64..=700.0) {
            let cfg = SensorConfig::default();
            let back = range_to_bin(bin_to_range(t, &cfg).unwrap(), &cfg);
            proptest::prop_assert!((back - t).abs() < 1e-9);
        }
    }
}
