//! Evaluation metrics: ghost recall, ghost removal rate, ghost false-positive
//! rate, and trajectory errors.
//!
//! Ratios that are undefined for an empty denominator come back as `None`.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

use crate::annotate::OrientedBox;
use crate::error::{FwlError, Result};
use crate::frame::{LabelVolume, Peak, PeakClass, PointCloud};
use crate::geometry::{Pose, Trajectory};
use crate::spatial::KdTree;

pub const DEFAULT_REMOVAL_RADIUS_M: f64 = 0.001;
pub const DEFAULT_RTE_WINDOW: usize = 10;

/// Fraction of ground-truth Ghost peaks with at least one voxel of their
/// FWHM support predicted Ghost. Peak positions are in the volume's bins.
pub fn ghost_recall(pred: &LabelVolume, gt_peaks: &[Peak]) -> Result<Option<f64>> {
    let dims = pred.dims();
    let mut total = 0usize;
    let mut hit = 0usize;
    for p in gt_peaks.iter().filter(|p| p.label == PeakClass::Ghost) {
        if p.row >= dims.h || p.col >= dims.w || !(p.position >= 0.0) || p.position > (dims.t as f64 - 1.0) {
            return Err(FwlError::DimMismatch(format!(
                "ghost peak at ({}, {}, {}) outside prediction grid {dims}",
                p.row, p.col, p.position
            )));
        }
        total += 1;
        let (lo, hi) = support(p, dims.t);
        let column = pred.column(p.row, p.col);
        if column[lo..=hi].contains(&PeakClass::Ghost) {
            hit += 1;
        }
    }
    Ok((total > 0).then(|| hit as f64 / total as f64))
}

/// Inclusive bin range `[p - w/2, p + w/2]`, at least the nearest bin.
pub fn support(p: &Peak, t: usize) -> (usize, usize) {
    let last = (t - 1) as f64;
    let half = if p.width.is_finite() { p.width.max(0.0) / 2.0 } else { 0.0 };
    let lo = (p.position - half).ceil().max(0.0);
    let hi = (p.position + half).floor().min(last);
    if lo <= hi {
        (lo as usize, hi as usize)
    } else {
        let c = p.position.round().clamp(0.0, last) as usize;
        (c, c)
    }
}

/// Share of ground-truth ghost points with no denoised point within `r`.
pub fn ghost_removal_rate(gt_ghost_points: &PointCloud, denoised: &PointCloud, r: f64) -> Option<f64> {
    if gt_ghost_points.is_empty() {
        return None;
    }
    let tree = KdTree::new(denoised.positions());
    let removed = gt_ghost_points
        .points
        .iter()
        .filter(|p| !tree.any_within(&p.position, r))
        .count();
    Some(removed as f64 / gt_ghost_points.len() as f64)
}

/// A 3D detection with yaw about +z.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionBox {
    pub center: Vector3<f64>,
    pub half_extents: Vector3<f64>,
    pub yaw: f64,
    pub label: String,
    pub score: f64,
}

impl DetectionBox {
    pub fn to_obb(&self) -> Result<OrientedBox> {
        let (s, c) = self.yaw.sin_cos();
        OrientedBox::new(self.center, Vector3::new(c, s, 0.0), Vector3::new(-s, c, 0.0), self.half_extents)
    }
}

/// Percentage of `target_class` detections overlapping some ghost region.
pub fn ghost_fp_rate(detections: &[DetectionBox], ghost_regions: &[OrientedBox], target_class: &str) -> Result<Option<f64>> {
    let mut total = 0usize;
    let mut fp = 0usize;
    for d in detections.iter().filter(|d| d.label == target_class) {
        total += 1;
        let b = d.to_obb()?;
        if ghost_regions.iter().any(|g| g.intersects(&b)) {
            fp += 1;
        }
    }
    Ok((total > 0).then(|| 100.0 * fp as f64 / total as f64))
}

/// Parses `label cx cy cz hx hy hz yaw score` lines (`#` comments allowed).
pub fn parse_detections(text: &str, path: &std::path::Path) -> Result<Vec<DetectionBox>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let err = |r: String| FwlError::format(path, format!("line {}: {r}", i + 1));
        if f.len() != 9 {
            return Err(err(format!("expected 9 fields, found {}", f.len())));
        }
        let mut v = [0.0f64; 8];
        for (x, s) in v.iter_mut().zip(&f[1..]) {
            *x = s.parse().map_err(|_| err(format!("bad number `{s}`")))?;
        }
        if v[3..6].iter().any(|&e| !(e > 0.0)) {
            return Err(err("box extents must be > 0".into()));
        }
        out.push(DetectionBox {
            label: f[0].to_string(),
            center: Vector3::new(v[0], v[1], v[2]),
            half_extents: Vector3::new(v[3], v[4], v[5]),
            yaw: v[6],
            score: v[7],
        });
    }
    Ok(out)
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Least-squares rotation and translation taking `src` onto `dst`.
pub fn align_rigid(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<(Rotation3<f64>, Vector3<f64>)> {
    if src.len() != dst.len() {
        return Err(FwlError::DimMismatch("alignment needs paired points".into()));
    }
    if src.len() < 3 {
        return Err(FwlError::Degenerate(format!("need at least 3 poses, got {}", src.len())));
    }
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - cd) * (s - cs).transpose();
    }
    for pts in [src, dst] {
        let c = pts.iter().sum::<Vector3<f64>>() / n;
        let mut spread = Matrix3::zeros();
        for p in pts {
            spread += (p - c) * (p - c).transpose();
        }
        let sv = spread.symmetric_eigenvalues();
        let mut sv: Vec<f64> = sv.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        if sv[0] <= 0.0 || sv[1] <= 1e-12 * sv[0] {
            return Err(FwlError::Degenerate("trajectory positions are collinear".into()));
        }
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rot = Rotation3::from_matrix_unchecked(u * d * v_t);
    Ok((rot, cd - rot * cs))
}

/// Ground-truth pose nearest in time to each estimated pose.
fn associate<'a>(est: &Trajectory, gt: &'a Trajectory) -> Vec<&'a Pose> {
    let g = gt.poses();
    est.poses()
        .iter()
        .map(|e| {
            let i = g.partition_point(|p| p.timestamp < e.timestamp);
            match (i.checked_sub(1).map(|j| &g[j]), g.get(i)) {
                (Some(a), Some(b)) => {
                    if e.timestamp - a.timestamp <= b.timestamp - e.timestamp {
                        a
                    } else {
                        b
                    }
                }
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => unreachable!("gt is non-empty"),
            }
        })
        .collect()
}

/// Absolute trajectory error after rigid alignment of `est` onto `gt`.
///
/// Each estimated pose is paired with the ground-truth pose nearest in time.
pub fn ate(est: &Trajectory, gt: &Trajectory) -> Result<(f64, f64)> {
    if est.len() < 3 || gt.len() < 3 {
        return Err(FwlError::Degenerate("ATE needs at least 3 poses per trajectory".into()));
    }
    let paired = associate(est, gt);
    let src = est.positions();
    let dst: Vec<Vector3<f64>> = paired.iter().map(|p| p.translation()).collect();
    let (rot, t) = align_rigid(&src, &dst)?;
    let errs: Vec<f64> = src.iter().zip(&dst).map(|(s, d)| (rot * s + t - d).norm()).collect();
    Ok(mean_std(&errs))
}

/// Windowed relative translation error.
///
/// For each `i`, compares the displacement from pose `i` to pose
/// `i + window`, expressed in the frame of pose `i`, between `est` and `gt`.
/// Poses are matched by index; their timestamps must agree within 1 ms.
pub fn rte(est: &Trajectory, gt: &Trajectory, window: usize) -> Result<(f64, f64)> {
    if window == 0 {
        return Err(FwlError::config("window_frames", "must be > 0"));
    }
    if est.len() != gt.len() {
        return Err(FwlError::DimMismatch(format!("{} vs {} poses", est.len(), gt.len())));
    }
    if est.len() <= window {
        return Err(FwlError::Degenerate(format!(
            "trajectory of {} poses is shorter than window {window}",
            est.len()
        )));
    }
    let (e, g) = (est.poses(), gt.poses());
    if e.iter().zip(g).any(|(a, b)| (a.timestamp - b.timestamp).abs() > 1e-3) {
        return Err(FwlError::DimMismatch("RTE needs matched timestamps".into()));
    }
    let rel = |p: &[Pose], i: usize| -> Vector3<f64> {
        let r: UnitQuaternion<f64> = p[i].rotation();
        r.inverse() * (p[i + window].translation() - p[i].translation())
    };
    let errs: Vec<f64> = (0..e.len() - window).map(|i| (rel(e, i) - rel(g, i)).norm()).collect();
    Ok(mean_std(&errs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::{Dims, Point3};
    use nalgebra::{Isometry3, Translation3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ghost(row: usize, position: f64) -> Peak {
        Peak { row, col: 0, position, amplitude: 1.0, width: 4.0, label: PeakClass::Ghost }
    }

    fn circle(n: usize, radius: f64) -> Trajectory {
        Trajectory::new(
            (0..n)
                .map(|i| {
                    let a = i as f64 * 0.3;
                    Pose::from_yaw(a + std::f64::consts::FRAC_PI_2, Vector3::new(radius * a.cos(), radius * a.sin(), 0.1 * a), i as f64)
                })
                .collect(),
        )
        .unwrap()
    }

    fn moved(t: &Trajectory, iso: &Isometry3<f64>) -> Trajectory {
        t.transformed(iso)
    }

    #[test]
    fn recall_counting() {
        let dims = Dims::new(10, 1, 64);
        let gt: Vec<Peak> = (0..10).map(|r| ghost(r, 30.0)).collect();
        let mut pred = LabelVolume::noise(dims);
        assert_eq!(ghost_recall(&pred, &gt).unwrap(), Some(0.0));
        for r in 0..7 {
            pred.set(r, 0, 28 + r % 5, PeakClass::Ghost);
        }
        pred.set(8, 0, 27, PeakClass::Ghost);
        assert_eq!(ghost_recall(&pred, &gt).unwrap(), Some(0.7));
        let exact = crate::annotate::expand_labels_fwhm(&gt, dims);
        assert_eq!(ghost_recall(&exact, &gt).unwrap(), Some(1.0));
        assert_eq!(ghost_recall(&pred, &[]).unwrap(), None);
        assert!(ghost_recall(&pred, &[ghost(10, 3.0)]).is_err());
    }

    #[test]
    fn removal_rate_cases() {
        let gt: PointCloud = (0..5).map(|i| Point3::at(i as f64, 0.0, 0.0)).collect();
        assert_eq!(ghost_removal_rate(&gt, &PointCloud::default(), 0.001), Some(1.0));
        assert_eq!(ghost_removal_rate(&gt, &gt, 0.001), Some(0.0));
        assert_eq!(ghost_removal_rate(&PointCloud::default(), &gt, 0.001), None);
    }

    #[test]
    fn removal_rate_matches_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gt: PointCloud = (0..400).map(|_| Point3::at(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), 0.0)).collect();
        let mut den: PointCloud = gt.points.iter().filter(|_| rng.random_bool(0.5)).copied().collect();
        den.points.extend((0..300).map(|_| Point3::at(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), 0.0)));
        let removed = gt
            .points
            .iter()
            .filter(|g| den.points.iter().all(|d| (g.position - d.position).norm() > 0.001))
            .count();
        assert_eq!(ghost_removal_rate(&gt, &den, 0.001), Some(removed as f64 / 400.0));
    }

    #[test]
    fn fp_rate_cases() {
        let region = OrientedBox::axis_aligned(Vector3::new(0.0, 0.0, 0.0), Vector3::new(4.0, 4.0, 2.0)).unwrap();
        let det = |x: f64, yaw: f64, label: &str| DetectionBox {
            center: Vector3::new(x, 2.0, 1.0),
            half_extents: Vector3::new(0.4, 0.4, 0.9),
            yaw,
            label: label.into(),
            score: 0.9,
        };
        let dets = vec![det(1.0, 0.0, "pedestrian"), det(4.3, 0.7, "pedestrian"), det(3.0, 0.0, "pedestrian"), det(9.0, 0.2, "pedestrian"), det(2.0, 0.0, "car")];
        assert_eq!(ghost_fp_rate(&dets, &[region], "pedestrian").unwrap(), Some(75.0));
        assert_eq!(ghost_fp_rate(&dets[3..4], &[region], "pedestrian").unwrap(), Some(0.0));
        assert_eq!(ghost_fp_rate(&dets[..1], &[region], "pedestrian").unwrap(), Some(100.0));
        assert_eq!(ghost_fp_rate(&[], &[region], "pedestrian").unwrap(), None);
    }

    #[test]
    fn ate_identity_and_rigid_invariance() {
        let gt = circle(30, 5.0);
        let (m, s) = ate(&gt, &gt).unwrap();
        assert!(m < 1e-9 && s < 1e-9);
        let iso = Isometry3::from_parts(Translation3::new(3.0, -2.0, 1.0), UnitQuaternion::from_euler_angles(0.3, -0.2, 1.1));
        let (m, _) = ate(&moved(&gt, &iso), &gt).unwrap();
        assert!(m < 1e-9);
        let (m, _) = ate(&gt, &moved(&gt, &iso)).unwrap();
        assert!(m < 1e-9);
    }

    #[test]
    fn ate_constructed_lateral_offset() {
        // Every estimate sits 0.5 m outside the ground-truth circle; the
        // optimal alignment is the identity, leaving 0.5 m everywhere.
        let n = 36;
        let ring = |r: f64| {
            Trajectory::new(
                (0..n)
                    .map(|i| {
                        let a = i as f64 * std::f64::consts::TAU / n as f64;
                        Pose::from_translation(r * a.cos(), r * a.sin(), 0.0).with_timestamp(i as f64)
                    })
                    .collect(),
            )
            .unwrap()
        };
        let (m, s) = ate(&ring(10.5), &ring(10.0)).unwrap();
        assert!((m - 0.5).abs() < 1e-6, "{m}");
        assert!(s < 1e-6);
    }

    #[test]
    fn ate_rejects_degenerate() {
        let line = Trajectory::new((0..5).map(|i| Pose::from_translation(i as f64, 0.0, 0.0).with_timestamp(i as f64)).collect()).unwrap();
        assert!(ate(&line, &line).is_err());
        let short = Trajectory::new(vec![Pose::identity()]).unwrap();
        assert!(ate(&short, &short).is_err());
    }

    #[test]
    fn rte_cases() {
        let gt = circle(40, 4.0);
        assert_eq!(rte(&gt, &gt, 10).unwrap(), (0.0, 0.0));
        let iso = Isometry3::from_parts(Translation3::new(1.0, 2.0, 3.0), UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3));
        let (m, _) = rte(&moved(&gt, &iso), &gt, 10).unwrap();
        assert!(m < 1e-9);
        // Straight drift of delta per frame with identity orientation.
        let straight = |drift: f64| {
            Trajectory::new((0..30).map(|i| Pose::from_translation(i as f64, drift * i as f64, 0.0).with_timestamp(i as f64)).collect()).unwrap()
        };
        let (m, s) = rte(&straight(0.02), &straight(0.0), 10).unwrap();
        assert!((m - 0.2).abs() < 1e-6 && s < 1e-9);
        assert!(rte(&straight(0.0), &straight(0.0), 30).is_err());
    }

    proptest! {
        #[test]
        fn ate_invariant_under_rigid_motion(yaw in -3.0f64..3.0, tx in -10.0f64..10.0, roll in -1.0f64..1.0, noise_seed in 0u64..50) {
            let gt = circle(25, 3.0);
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
            let noisy = Trajectory::new(
                gt.poses()
                    .iter()
                    .map(|p| {
                        let j = Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
                        Pose::new(p.rotation(), p.translation() + j, p.timestamp)
                    })
                    .collect(),
            )
            .unwrap();
            let base = ate(&noisy, &gt).unwrap();
            let iso = Isometry3::from_parts(Translation3::new(tx, -tx, 0.5), UnitQuaternion::from_euler_angles(roll, 0.2, yaw));
            let moved_est = ate(&moved(&noisy, &iso), &gt).unwrap();
            let moved_gt = ate(&noisy, &moved(&gt, &iso)).unwrap();
            prop_assert!((base.0 - moved_est.0).abs() < 1e-9);
            prop_assert!((base.0 - moved_gt.0).abs() < 1e-9);
        }

        #[test]
        fn removal_rate_is_monotone(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt: PointCloud = (0..50).map(|_| Point3::at(rng.random_range(0..10) as f64, 0.0, 0.0)).collect();
            let den: PointCloud = (0..30).map(|_| Point3::at(rng.random_range(0..10) as f64, 0.0, 0.0)).collect();
            let fewer: PointCloud = den.points.iter().filter(|_| rng.random_bool(0.6)).copied().collect();
            prop_assert!(ghost_removal_rate(&gt, &fewer, 0.001).unwrap() >= ghost_removal_rate(&gt, &den, 0.001).unwrap());
        }
    }
}
