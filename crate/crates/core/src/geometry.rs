//! Rigid poses and trajectories.

use nalgebra::{Isometry3, Point3 as NPoint3, Quaternion, Translation3, UnitQuaternion, Vector3};

use crate::error::{FwlError, Result};

/// A timestamped rigid transform from the sensor frame to the world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub iso: Isometry3<f64>,
    /// Seconds.
    pub timestamp: f64,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            iso: Isometry3::identity(),
            timestamp: 0.0,
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>, timestamp: f64) -> Self {
        Self {
            iso: Isometry3::from_parts(Translation3::from(translation), rotation),
            timestamp,
        }
    }

    /// Pure translation.
    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self::new(UnitQuaternion::identity(), Vector3::new(x, y, z), 0.0)
    }

    pub fn with_timestamp(mut self, timestamp: f64) -> Self {
        self.timestamp = timestamp;
        self
    }

    /// Rotation about +z by `yaw` radians followed by a translation.
    pub fn from_yaw(yaw: f64, translation: Vector3<f64>, timestamp: f64) -> Self {
        Self::new(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
            translation,
            timestamp,
        )
    }

    /// Builds a pose from raw quaternion components `(qx, qy, qz, qw)`.
    ///
    /// Text formats carry a handful of digits, so components are renormalized
    /// when their norm is within 1e-3 of one; anything further off is rejected.
    pub fn from_raw_quaternion(
        translation: Vector3<f64>,
        q: [f64; 4],
        timestamp: f64,
    ) -> Result<Self> {
        let quat = Quaternion::new(q[3], q[0], q[1], q[2]);
        let norm = quat.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-3 {
            return Err(FwlError::Domain(format!("quaternion norm {norm} is not 1")));
        }
        Ok(Self::new(
            UnitQuaternion::new_normalize(quat),
            translation,
            timestamp,
        ))
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.iso.translation.vector
    }

    pub fn rotation(&self) -> UnitQuaternion<f64> {
        self.iso.rotation
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.iso.transform_point(&NPoint3::from(*p)).coords
    }

    /// `self ∘ other`, keeping `other`'s timestamp.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            iso: self.iso * other.iso,
            timestamp: other.timestamp,
        }
    }

    pub fn inverse(&self) -> Pose {
        Pose {
            iso: self.iso.inverse(),
            timestamp: self.timestamp,
        }
    }

    /// True when rotation and translation agree within `tol`.
    pub fn approx_eq(&self, other: &Pose, tol: f64) -> bool {
        (self.translation() - other.translation()).norm() <= tol
            && self.rotation().angle_to(&other.rotation()) <= tol
    }
}

/// A time-ordered list of poses with strictly increasing timestamps.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    poses: Vec<Pose>,
}

impl Trajectory {
    pub fn new(poses: Vec<Pose>) -> Result<Self> {
        for w in poses.windows(2) {
            if !(w[1].timestamp > w[0].timestamp) {
                return Err(FwlError::Domain(format!(
                    "timestamps must be strictly increasing ({} then {})",
                    w[0].timestamp, w[1].timestamp
                )));
            }
        }
        Ok(Self { poses })
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(Pose::translation).collect()
    }

    /// Applies `t` on the left of every pose.
    pub fn transformed(&self, t: &Isometry3<f64>) -> Trajectory {
        Trajectory {
            poses: self
                .poses
                .iter()
                .map(|p| Pose {
                    iso: t * p.iso,
                    timestamp: p.timestamp,
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn yaw_rotates_boresight_onto_y() {
        let pose = Pose::from_yaw(FRAC_PI_2, Vector3::zeros(), 0.0);
        let p = pose.transform_point(&Vector3::new(10.0, 0.0, 0.0));
        assert!((p - Vector3::new(0.0, 10.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn raw_quaternion_is_checked() {
        let t = Vector3::zeros();
        assert!(Pose::from_raw_quaternion(t, [0.0, 0.0, 0.0, 1.0], 0.0).is_ok());
        assert!(Pose::from_raw_quaternion(t, [0.0, 0.0, 0.0, 2.0], 0.0).is_err());
        let p = Pose::from_raw_quaternion(t, [0.0, 0.0, 0.70710678, 0.70710678], 0.0).unwrap();
        assert!((p.rotation().into_inner().norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn trajectory_requires_increasing_time() {
        let a = Pose::identity();
        let mut b = Pose::identity();
        b.timestamp = 1.0;
        assert!(Trajectory::new(vec![a, b]).is_ok());
        assert!(Trajectory::new(vec![b, a]).is_err());
        assert!(Trajectory::new(vec![a, a]).is_err());
    }
}
