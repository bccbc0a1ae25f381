//! Near-uniform viewpoint sampling on the sphere.

use nalgebra::Vector3;

use super::rotation::{canonical_viewpoint, Rotation};
use super::GeometryError;

/// Sample `n` viewpoints whose view directions form a Fibonacci lattice over
/// the full unit sphere. The in-plane component of each rotation is fixed by
/// the canonical up-vector convention, so the result is deterministic.
pub fn sample_viewpoints(n: usize) -> Result<Vec<Rotation>, GeometryError> {
    Ok(fibonacci_directions(n)?
        .iter()
        .map(canonical_viewpoint)
        .collect())
}

/// The Fibonacci (golden-angle spiral) lattice of `n` unit vectors.
pub(crate) fn fibonacci_directions(n: usize) -> Result<Vec<Vector3<f64>>, GeometryError> {
    if n < 2 {
        return Err(GeometryError::InvalidArgument(format!(
            "need at least 2 viewpoints, got {n}"
        )));
    }
    let golden_ratio = (1.0 + 5f64.sqrt()) / 2.0;
    let golden_angle = std::f64::consts::TAU * (1.0 - 1.0 / golden_ratio);
    let nf = n as f64;
    Ok((0..n)
        .map(|i| {
            let fi = i as f64;
            let z = 1.0 - (2.0 * fi + 1.0) / nf;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let theta = golden_angle * fi;
            Vector3::new(r * theta.cos(), r * theta.sin(), z)
        })
        .collect())
}

/// Average adjacent viewpoint distance in degrees: the mean over all
/// viewpoints of the geodesic angle to the nearest other view direction,
/// computed by brute-force search over all pairs.
pub fn view_direction_aavd_deg(rotations: &[Rotation]) -> f64 {
    let dirs: Vec<Vector3<f64>> = rotations.iter().map(|r| r.view_axis()).collect();
    let mut sum = 0.0;
    for (i, a) in dirs.iter().enumerate() {
        let mut best = -2.0f64;
        for (j, b) in dirs.iter().enumerate() {
            if i != j {
                let d = a.dot(b);
                if d > best {
                    best = d;
                }
            }
        }
        sum += best.clamp(-1.0, 1.0).acos();
    }
    (sum / dirs.len() as f64).to_degrees()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn rejects_tiny_n() {
        assert!(sample_viewpoints(0).is_err());
        assert!(sample_viewpoints(1).is_err());
        assert!(sample_viewpoints(2).is_ok());
    }

    #[test]
    fn deterministic_and_valid() {
        let a = sample_viewpoints(100).unwrap();
        let b = sample_viewpoints(100).unwrap();
        assert_eq!(a.len(), 100);
        for (ra, rb) in a.iter().zip(&b) {
            assert_eq!(ra.matrix(), rb.matrix());
            assert!(Rotation::from_matrix(*ra.matrix()).is_ok());
        }
    }

    #[test]
    fn covers_both_hemispheres() {
        let rots = sample_viewpoints(500).unwrap();
        let (mut up, mut down) = (0, 0);
        for r in &rots {
            if r.view_axis().z > 0.0 {
                up += 1;
            } else {
                down += 1;
            }
        }
        assert!(up > 200 && down > 200, "up {up} down {down}");
    }

    /// Worst-case deviation between the empirical fraction of directions in a
    /// spherical cap and the cap's area fraction, over a fixed set of caps.
    fn cap_discrepancy(dirs: &[Vector3<f64>], rng: &mut StdRng) -> f64 {
        let mut worst = 0.0f64;
        for _ in 0..300 {
            let c = Vector3::new(
                rng.gen_range(-1.0..1.0f64),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if c.norm() < 1e-6 {
                continue;
            }
            let c = c.normalize();
            let h = rng.gen_range(-0.95..0.95f64); // cos of cap angle
            let inside = dirs.iter().filter(|d| d.dot(&c) > h).count() as f64;
            let frac = inside / dirs.len() as f64;
            let area = (1.0 - h) / 2.0;
            worst = worst.max((frac - area).abs());
        }
        worst
    }

    #[test]
    fn cap_discrepancy_decreases_with_n() {
        let mut d = Vec::new();
        for n in [250usize, 1000, 4000] {
            let mut rng = StdRng::seed_from_u64(99);
            let dirs = fibonacci_directions(n).unwrap();
            d.push(cap_discrepancy(&dirs, &mut rng));
        }
        assert!(d[0] > d[1] && d[1] > d[2], "discrepancies {d:?}");
    }

    #[test]
    fn aavd_small_sample_matches_hand_scan() {
        // Independent nearest-neighbor scan over view axes.
        let rots = sample_viewpoints(50).unwrap();
        let axes: Vec<_> = rots.iter().map(|r| r.view_axis()).collect();
        let mut sum = 0.0;
        for i in 0..axes.len() {
            let mut best = f64::INFINITY;
            for j in 0..axes.len() {
                if i != j {
                    let ang = axes[i].dot(&axes[j]).clamp(-1.0, 1.0).acos();
                    best = best.min(ang);
                }
            }
            sum += best;
        }
        let expect = (sum / axes.len() as f64).to_degrees();
        let got = view_direction_aavd_deg(&rots);
        assert!((expect - got).abs() < 1e-9);
    }
}
