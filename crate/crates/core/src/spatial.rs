//! Exact nearest-neighbour queries over 3D points.
//!
//! A static kd-tree laid out implicitly over a permuted index array. Every
//! query computes distances with [`distance`], so results are bit-identical to
//! a brute-force scan using the same function.

use nalgebra::Vector3;

/// Euclidean distance used by every spatial query in the crate.
#[inline]
pub fn distance(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    (a - b).norm()
}

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    /// Permutation of point indices; node of slice `[lo, hi)` sits at `mid`.
    order: Vec<usize>,
    /// Split axis of the node stored at each slot of `order`.
    axis: Vec<u8>,
}

impl KdTree {
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        let n = points.len();
        let mut tree = Self {
            points,
            order: (0..n).collect(),
            axis: vec![0; n],
        };
        tree.build(0, n);
        tree
    }

    fn build(&mut self, lo: usize, hi: usize) {
        if hi <= lo {
            return;
        }
        let slice = &self.order[lo..hi];
        let mut min = Vector3::repeat(f64::INFINITY);
        let mut max = Vector3::repeat(f64::NEG_INFINITY);
        for &i in slice {
            min = min.inf(&self.points[i]);
            max = max.sup(&self.points[i]);
        }
        let axis = (max - min).imax();
        let mid = lo + (hi - lo) / 2;
        let points = &self.points;
        self.order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
            points[a][axis]
                .total_cmp(&points[b][axis])
                .then(a.cmp(&b))
        });
        self.axis[mid] = axis as u8;
        self.build(lo, mid);
        self.build(mid + 1, hi);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    /// Nearest point as `(index, distance)`; lowest index wins ties.
    pub fn nearest(&self, q: &Vector3<f64>) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        self.nearest_rec(0, self.len(), q, &mut best);
        best
    }

    fn nearest_rec(&self, lo: usize, hi: usize, q: &Vector3<f64>, best: &mut Option<(usize, f64)>) {
        if hi <= lo {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid];
        let p = &self.points[idx];
        let d = distance(q, p);
        match best {
            Some((bi, bd)) if d > *bd || (d == *bd && idx > *bi) => {}
            _ => *best = Some((idx, d)),
        }
        let axis = self.axis[mid] as usize;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.nearest_rec(near.0, near.1, q, best);
        if best.map_or(true, |(_, bd)| diff.abs() <= bd) {
            self.nearest_rec(far.0, far.1, q, best);
        }
    }

    /// Distances to the `k` nearest points, ascending, optionally skipping one index.
    pub fn knn_distances(&self, q: &Vector3<f64>, k: usize, skip: Option<usize>) -> Vec<f64> {
        if k == 0 {
            return Vec::new();
        }
        let mut heap: Vec<f64> = Vec::with_capacity(k + 1);
        self.knn_rec(0, self.len(), q, k, skip, &mut heap);
        heap
    }

    fn knn_rec(
        &self,
        lo: usize,
        hi: usize,
        q: &Vector3<f64>,
        k: usize,
        skip: Option<usize>,
        best: &mut Vec<f64>,
    ) {
        if hi <= lo {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid];
        let p = &self.points[idx];
        if skip != Some(idx) {
            let d = distance(q, p);
            if best.len() < k || d < best[best.len() - 1] {
                let pos = best.partition_point(|&x| x <= d);
                best.insert(pos, d);
                best.truncate(k);
            }
        }
        let axis = self.axis[mid] as usize;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.knn_rec(near.0, near.1, q, k, skip, best);
        if best.len() < k || diff.abs() <= best[best.len() - 1] {
            self.knn_rec(far.0, far.1, q, k, skip, best);
        }
    }

    /// Indices of all points with `distance <= radius`, ascending.
    pub fn within(&self, q: &Vector3<f64>, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.within_rec(0, self.len(), q, radius, &mut |i| out.push(i));
        out.sort_unstable();
        out
    }

    /// Number of points with `distance <= radius`, optionally skipping one index.
    pub fn count_within(&self, q: &Vector3<f64>, radius: f64, skip: Option<usize>) -> usize {
        let mut n = 0;
        self.within_rec(0, self.len(), q, radius, &mut |i| {
            if skip != Some(i) {
                n += 1
            }
        });
        n
    }

    /// True when some point lies within `radius`.
    pub fn any_within(&self, q: &Vector3<f64>, radius: f64) -> bool {
        self.nearest(q).is_some_and(|(_, d)| d <= radius)
    }

    fn within_rec(&self, lo: usize, hi: usize, q: &Vector3<f64>, r: f64, visit: &mut dyn FnMut(usize)) {
        if hi <= lo {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid];
        let p = &self.points[idx];
        if distance(q, p) <= r {
            visit(idx);
        }
        let axis = self.axis[mid] as usize;
        let diff = q[axis] - p[axis];
        if diff <= r {
            // q can reach the lower half.
            self.within_rec(lo, mid, q, r, visit);
        }
        if diff >= -r {
            self.within_rec(mid + 1, hi, q, r, visit);
        }
    }
}
