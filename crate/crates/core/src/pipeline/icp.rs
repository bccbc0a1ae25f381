//! Point-to-point ICP with closed-form SVD alignment per iteration.

use nalgebra::{Matrix3, Vector3};

use super::PipelineError;
use crate::geometry::{CameraIntrinsics, KdTree3, Pose, Rotation};
use crate::render::{DepthFrame, MaskFrame};

#[derive(Debug, Clone)]
pub struct IcpResult {
    pub pose: Pose,
    /// Point-to-point RMS (mm) under the final correspondences.
    pub rms: f64,
    pub iterations: usize,
    /// Set when the input was degenerate and the initial pose was returned
    /// unchanged.
    pub skipped: bool,
    /// RMS after each alignment step.
    pub rms_trace: Vec<f64>,
}

/// Back-project every masked valid pixel into a camera-frame point cloud
/// (mm): `p = z · K⁻¹ [u + ½, v + ½, 1]ᵀ` at pixel centers.
pub fn mask_to_points(
    depth: &DepthFrame,
    mask: &MaskFrame,
    intr: &CameraIntrinsics,
) -> Result<Vec<Vector3<f64>>, PipelineError> {
    if depth.width != mask.width || depth.height != mask.height {
        return Err(PipelineError::EstimationFailure(
            "depth and mask sizes differ".into(),
        ));
    }
    let mut pts = Vec::new();
    for y in 0..depth.height {
        for x in 0..depth.width {
            let d = depth.at(x, y);
            if mask.at(x, y) && d > 0.0 {
                pts.push(intr.back_project(
                    f64::from(x) + 0.5,
                    f64::from(y) + 0.5,
                    f64::from(d),
                ));
            }
        }
    }
    if pts.is_empty() {
        return Err(PipelineError::InvalidDepth);
    }
    Ok(pts)
}

/// Deterministic stride subsampling down to at most `max_points`.
pub fn subsample_points(points: &[Vector3<f64>], max_points: usize) -> Vec<Vector3<f64>> {
    if points.len() <= max_points || max_points == 0 {
        return points.to_vec();
    }
    let stride = points.len().div_ceil(max_points);
    points.iter().step_by(stride).copied().collect()
}

fn centroid(pts: &[Vector3<f64>]) -> Vector3<f64> {
    pts.iter().sum::<Vector3<f64>>() / pts.len() as f64
}

fn collinear(pts: &[Vector3<f64>]) -> bool {
    if pts.len() < 3 {
        return true;
    }
    let c = centroid(pts);
    let mut cov = Matrix3::<f64>::zeros();
    for p in pts {
        let d = p - c;
        cov += d * d.transpose();
    }
    let svd = cov.svd(false, false);
    // Rank < 2 within tolerance means all points sit on a line.
    let s = svd.singular_values;
    s[1] <= s[0] * 1e-12
}

/// Rigid alignment minimizing `Σ |R·src + t − dst|²` (Kabsch/Umeyama).
fn align_svd(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
) -> Option<(Rotation, Vector3<f64>)> {
    let cs = centroid(src);
    let cd = centroid(dst);
    let mut h = Matrix3::<f64>::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u?;
    let vt = svd.v_t?;
    let mut r = vt.transpose() * u.transpose();
    if r.determinant() < 0.0 {
        // Reflection: flip the axis of least variance.
        let mut d = Matrix3::identity();
        d[(2, 2)] = -1.0;
        r = vt.transpose() * d * u.transpose();
    }
    let rot = Rotation::from_matrix(r).ok()?;
    let t = cd - rot.rotate(&cs);
    Some((rot, t))
}

/// Refine `init` so the model points (object frame) align with the scene
/// points (camera frame). Stops at `max_iters` or when the RMS improves by
/// less than `tol_mm`. Degenerate clouds return the initial pose with the
/// skipped flag set.
pub fn icp_refine(
    model_points: &[Vector3<f64>],
    scene_points: &[Vector3<f64>],
    init: &Pose,
    max_iters: usize,
    tol_mm: f64,
) -> Result<IcpResult, PipelineError> {
    if model_points.len() < 3
        || scene_points.len() < 3
        || collinear(model_points)
        || collinear(scene_points)
    {
        return Ok(IcpResult {
            pose: init.clone(),
            rms: f64::NAN,
            iterations: 0,
            skipped: true,
            rms_trace: Vec::new(),
        });
    }

    // Correspondences search in the static model frame: transform the scene
    // into object coordinates with the current pose inverse, so the KD-tree
    // is built once.
    let tree = KdTree3::build(model_points);
    let mut pose = init.clone();
    let mut prev_rms = f64::INFINITY;
    let mut trace = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        let inv = pose.inverse();
        let mut matched_model = Vec::with_capacity(scene_points.len());
        for s in scene_points {
            let q = inv.transform_point(s);
            let (idx, _) = tree.nearest(&q).expect("nonempty model cloud");
            matched_model.push(model_points[idx]);
        }
        let Some((rot, t)) = align_svd(&matched_model, scene_points) else {
            break;
        };
        pose = Pose {
            rotation: rot,
            translation: t,
        };
        let mut sq = 0.0f64;
        for (m, s) in matched_model.iter().zip(scene_points) {
            sq += (pose.transform_point(m) - s).norm_squared();
        }
        let rms = (sq / scene_points.len() as f64).sqrt();
        trace.push(rms);
        if prev_rms - rms < tol_mm {
            prev_rms = rms;
            break;
        }
        prev_rms = rms;
    }
    Ok(IcpResult {
        pose,
        rms: prev_rms,
        iterations,
        skipped: false,
        rms_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::generate_shapes;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn mesh_points(n_mesh: u64) -> Vec<Vector3<f64>> {
        generate_shapes(1, n_mesh).unwrap()[0].vertices().to_vec()
    }

    #[test]
    fn pure_translation_recovered_in_one_iteration() {
        let model = mesh_points(5);
        let offset = Vector3::new(10.0, -5.0, 3.0);
        let scene: Vec<Vector3<f64>> = model.iter().map(|p| p + offset).collect();
        let res = icp_refine(&model, &scene, &Pose::identity(), 1, 1e-9).unwrap();
        assert!(!res.skipped);
        // Identity correspondence holds under a pure offset smaller than the
        // point spacing... not guaranteed in general, but the first aligned
        // step is the closed-form centroid alignment, which lands exactly.
        assert!((res.pose.translation - offset).norm() < 1e-6, "{:?}", res.pose.translation);
        assert!(
            (res.pose.rotation.matrix() - Rotation::identity().matrix()).abs().max() < 1e-6
        );
    }

    #[test]
    fn identical_clouds_at_ground_truth_stay_put() {
        let model = mesh_points(7);
        let gt = Pose::new(
            Rotation::rot_z(0.4).compose(&Rotation::rot_x(-0.2)),
            Vector3::new(20.0, 10.0, 800.0),
        )
        .unwrap();
        let scene: Vec<Vector3<f64>> = model.iter().map(|p| gt.transform_point(p)).collect();
        let res = icp_refine(&model, &scene, &gt, 10, 1e-9).unwrap();
        assert!(res.rms < 1e-9, "rms {}", res.rms);
        assert!((res.pose.translation - gt.translation).norm() < 1e-9);
        assert!((res.pose.rotation.matrix() - gt.rotation.matrix()).abs().max() < 1e-12);
    }

    #[test]
    fn converges_from_nearby_inits() {
        let mut rng = StdRng::seed_from_u64(9);
        let model = mesh_points(11);
        let gt = Pose::new(
            Rotation::rot_y(0.3).compose(&Rotation::rot_z(1.0)),
            Vector3::new(0.0, 0.0, 700.0),
        )
        .unwrap();
        let scene: Vec<Vector3<f64>> = model.iter().map(|p| gt.transform_point(p)).collect();
        for _ in 0..5 {
            let axis = crate::datagen::shapes::random_unit(&mut rng);
            let angle = rng.gen_range(0.0..5.0f64).to_radians();
            let q = nalgebra::UnitQuaternion::from_axis_angle(
                &nalgebra::Unit::new_normalize(axis),
                angle,
            );
            let perturb_r = Rotation::from_matrix(*q.to_rotation_matrix().matrix()).unwrap();
            let dt = Vector3::new(
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
            );
            let init = Pose {
                rotation: perturb_r.compose(&gt.rotation),
                translation: gt.translation + dt,
            };
            let res = icp_refine(&model, &scene, &init, 30, 1e-4).unwrap();
            let rot_err = crate::geometry::geodesic_angle_deg(&res.pose.rotation, &gt.rotation);
            let t_err = (res.pose.translation - gt.translation).norm();
            assert!(rot_err < 0.5, "rotation error {rot_err}°");
            assert!(t_err < 1.0, "translation error {t_err} mm");
        }
    }

    #[test]
    fn rms_trace_is_monotone_nonincreasing() {
        let mut rng = StdRng::seed_from_u64(21);
        let model = mesh_points(13);
        let gt = Pose::new(Rotation::rot_x(0.7), Vector3::new(5.0, -8.0, 600.0)).unwrap();
        let scene: Vec<Vector3<f64>> = model.iter().map(|p| gt.transform_point(p)).collect();
        let init = Pose {
            rotation: Rotation::rot_z(0.15).compose(&gt.rotation),
            translation: gt.translation + Vector3::new(8.0, 4.0, -6.0),
        };
        let _ = &mut rng;
        let res = icp_refine(&model, &scene, &init, 30, 1e-9).unwrap();
        for w in res.rms_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "rms rose: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn degenerate_cloud_is_skipped() {
        let line: Vec<Vector3<f64>> = (0..10)
            .map(|i| Vector3::new(f64::from(i), 0.0, 0.0))
            .collect();
        let scene = mesh_points(3);
        let res = icp_refine(&line, &scene, &Pose::identity(), 10, 1e-3).unwrap();
        assert!(res.skipped);
        assert_eq!(res.pose.translation, Vector3::zeros());
    }

    #[test]
    fn subsample_respects_budget_and_determinism() {
        let pts = mesh_points(17);
        let sub = subsample_points(&pts, 100);
        assert!(sub.len() <= 100);
        assert_eq!(sub, subsample_points(&pts, 100));
    }

    #[test]
    fn mask_to_points_roundtrip() {
        let intr = CameraIntrinsics::new(400.0, 410.0, 32.0, 32.0, 64, 64).unwrap();
        let mut depth = vec![0.0f32; 64 * 64];
        // Pixel whose center is the principal point: px = 32 → pixel 31
        // center is 31.5; place depth at several pixels.
        depth[20 * 64 + 40] = 900.0;
        depth[33 * 64 + 21] = 1200.0;
        let frame = DepthFrame::new(64, 64, depth, intr.clone()).unwrap();
        let mask = frame.mask();
        let pts = mask_to_points(&frame, &mask, &intr).unwrap();
        assert_eq!(pts.len(), frame.covered_pixels());
        for p in &pts {
            // Re-projection lands back on a pixel center.
            let (u, v) = intr.project(p);
            assert!((u - (u.floor() + 0.5)).abs() < 1e-6, "u = {u}");
            assert!((v - (v.floor() + 0.5)).abs() < 1e-6, "v = {v}");
        }
    }

    #[test]
    fn single_center_pixel_back_projects_on_axis() {
        let intr = CameraIntrinsics::new(500.0, 500.0, 10.5, 10.5, 21, 21).unwrap();
        let mut depth = vec![0.0f32; 21 * 21];
        depth[10 * 21 + 10] = 1000.0; // center (10.5, 10.5) = principal point
        let frame = DepthFrame::new(21, 21, depth, intr.clone()).unwrap();
        let pts = mask_to_points(&frame, &frame.mask(), &intr).unwrap();
        assert_eq!(pts.len(), 1);
        assert!((pts[0] - Vector3::new(0.0, 0.0, 1000.0)).norm() < 1e-9);
    }
}
