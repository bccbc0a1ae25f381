//! Exact nearest-neighbor search over static 3D point sets.

use nalgebra::Vector3;

/// A static KD-tree over 3D points. Queries return exact nearest neighbors.
#[derive(Debug, Clone)]
pub struct KdTree3 {
    // Points reordered so that every subtree slice has its median (by the
    // node's split axis) at the middle position.
    points: Vec<Vector3<f64>>,
    original: Vec<usize>,
    axes: Vec<u8>,
}

impl KdTree3 {
    pub fn build(points: &[Vector3<f64>]) -> KdTree3 {
        let mut items: Vec<(Vector3<f64>, usize)> =
            points.iter().copied().zip(0..points.len()).collect();
        let mut axes = vec![0u8; points.len()];
        build_recursive(&mut items, &mut axes, 0);
        KdTree3 {
            points: items.iter().map(|(p, _)| *p).collect(),
            original: items.iter().map(|(_, i)| *i).collect(),
            axes,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index (into the original point slice) and squared distance of the
    /// nearest point to `q`.
    pub fn nearest(&self, q: &Vector3<f64>) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, self.points.len(), q, &mut best);
        Some((self.original[best.0], best.1))
    }

    fn search(&self, lo: usize, hi: usize, q: &Vector3<f64>, best: &mut (usize, f64)) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let d2 = (self.points[mid] - q).norm_squared();
        if d2 < best.1 {
            *best = (mid, d2);
        }
        if hi - lo == 1 {
            return;
        }
        let axis = self.axes[mid] as usize;
        let delta = q[axis] - self.points[mid][axis];
        let (near_lo, near_hi, far_lo, far_hi) = if delta < 0.0 {
            (lo, mid, mid + 1, hi)
        } else {
            (mid + 1, hi, lo, mid)
        };
        self.search(near_lo, near_hi, q, best);
        if delta * delta < best.1 {
            self.search(far_lo, far_hi, q, best);
        }
    }
}

fn build_recursive(items: &mut [(Vector3<f64>, usize)], axes: &mut [u8], offset: usize) {
    if items.len() <= 1 {
        return;
    }
    // Split along the axis with the largest extent.
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for (p, _) in items.iter() {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let ext = hi - lo;
    let axis = if ext.x >= ext.y && ext.x >= ext.z {
        0
    } else if ext.y >= ext.z {
        1
    } else {
        2
    };
    let mid = items.len() / 2;
    items.select_nth_unstable_by(mid, |a, b| a.0[axis].partial_cmp(&b.0[axis]).unwrap());
    axes[offset + mid] = axis as u8;
    let (left, right) = items.split_at_mut(mid);
    build_recursive(left, axes, offset);
    build_recursive(&mut right[1..], axes, offset + mid + 1);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn brute(points: &[Vector3<f64>], q: &Vector3<f64>) -> (usize, f64) {
        let mut best = (0usize, f64::INFINITY);
        for (i, p) in points.iter().enumerate() {
            let d2 = (p - q).norm_squared();
            if d2 < best.1 {
                best = (i, d2);
            }
        }
        best
    }

    #[test]
    fn matches_bruteforce_on_random_sets() {
        let mut rng = StdRng::seed_from_u64(77);
        for n in [1usize, 2, 3, 17, 256, 1500] {
            let pts: Vec<Vector3<f64>> = (0..n)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-100.0..100.0f64),
                        rng.gen_range(-100.0..100.0),
                        rng.gen_range(-100.0..100.0),
                    )
                })
                .collect();
            let tree = KdTree3::build(&pts);
            for _ in 0..50 {
                let q = Vector3::new(
                    rng.gen_range(-120.0..120.0f64),
                    rng.gen_range(-120.0..120.0),
                    rng.gen_range(-120.0..120.0),
                );
                let (bi, bd) = brute(&pts, &q);
                let (ti, td) = tree.nearest(&q).unwrap();
                assert!((bd - td).abs() < 1e-12, "dist mismatch {bd} vs {td}");
                // Indices may differ only on exact ties.
                if bi != ti {
                    assert!((pts[bi] - q).norm_squared() == (pts[ti] - q).norm_squared());
                }
            }
        }
    }

    #[test]
    fn empty_tree() {
        let tree = KdTree3::build(&[]);
        assert!(tree.is_empty());
        assert!(tree.nearest(&Vector3::zeros()).is_none());
    }
}
