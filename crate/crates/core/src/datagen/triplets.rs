//! Viewpoint triplet sampling for encoder training.
//!
//! A triplet consists of an anchor view `v`, the same view under a different
//! in-plane rotation `v_theta`, and a view from a perturbed out-of-plane
//! direction `v_gamma`. All three are rendered with the codebook view
//! geometry (object centered at distance `f_base · diameter`).

use nalgebra::Vector3;
use rand::Rng;

use super::shapes::random_unit;
use super::DatagenError;
use crate::geometry::{canonical_viewpoint, Rotation, TriangleMesh};
use crate::render::{render_depth, codebook_intrinsics, codebook_view_pose, DepthFrame};
use crate::seed;

/// Out-of-plane perturbation range for `v_gamma`, degrees.
pub const GAMMA_RANGE_DEG: (f64, f64) = (10.0, 90.0);

/// One training triplet of raw (unaugmented, metric) depth renders.
#[derive(Debug, Clone)]
pub struct TrainingTriplet {
    /// Anchor view `V`.
    pub anchor: DepthFrame,
    /// `V_θ`: the anchor viewpoint under an extra in-plane rotation.
    pub rotated: DepthFrame,
    /// `V_γ`: a view from a direction `gamma_angle_deg` away.
    pub off_view: DepthFrame,
    /// Ground-truth in-plane rotation taking `anchor` to `rotated`.
    pub theta_gt: Rotation,
    /// Out-of-plane perturbation between `anchor` and `off_view`, degrees.
    pub gamma_angle_deg: f64,
    /// Canonical viewpoint rotation of the anchor direction.
    pub anchor_viewpoint: Rotation,
}

fn rotate_about_axis(v: &Vector3<f64>, axis: &Vector3<f64>, angle: f64) -> Vector3<f64> {
    // Rodrigues rotation.
    let (s, c) = angle.sin_cos();
    v * c + axis.cross(v) * s + axis * (axis.dot(v)) * (1.0 - c)
}

/// The pose parameters of one triplet, before rendering.
struct TripletParams {
    anchor_rot: Rotation,
    rotated_rot: Rotation,
    off_rot: Rotation,
    theta: f64,
    gamma_deg: f64,
    gamma_view: Rotation,
}

fn draw_triplet_params(rng: &mut impl Rng) -> TripletParams {
    let dir = random_unit(rng);
    let gamma_view = canonical_viewpoint(&dir);

    // Random base in-plane attitude for the anchor, plus the triplet's
    // relative in-plane rotation theta.
    let phi = rng.gen_range(0.0..std::f64::consts::TAU);
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let anchor_rot = Rotation::rot_z(phi).compose(&gamma_view);
    let rotated_rot = Rotation::rot_z(theta).compose(&anchor_rot);

    // Out-of-plane perturbation of the view direction.
    let gamma_deg = rng.gen_range(GAMMA_RANGE_DEG.0..GAMMA_RANGE_DEG.1);
    let tilt_axis = {
        let r = random_unit(rng);
        let a = dir.cross(&r);
        if a.norm() < 1e-6 {
            dir.cross(&Vector3::x()).normalize()
        } else {
            a.normalize()
        }
    };
    let off_dir = rotate_about_axis(&dir, &tilt_axis, gamma_deg.to_radians());
    let psi = rng.gen_range(0.0..std::f64::consts::TAU);
    let off_rot = Rotation::rot_z(psi).compose(&canonical_viewpoint(&off_dir));
    TripletParams {
        anchor_rot,
        rotated_rot,
        off_rot,
        theta,
        gamma_deg,
        gamma_view,
    }
}

/// Sample `anchors` triplets for one mesh, deterministic per seed.
pub fn sample_triplets(
    mesh: &TriangleMesh,
    anchors: usize,
    seed_value: u64,
    f_base: f64,
) -> Result<Vec<TrainingTriplet>, DatagenError> {
    let intr = codebook_intrinsics(f_base);
    let mut out = Vec::with_capacity(anchors);
    for i in 0..anchors {
        let mut rng = seed::rng(seed_value, "datagen/triplet", i as u64);
        let p = draw_triplet_params(&mut rng);
        let render = |rot: &Rotation| -> Result<DepthFrame, DatagenError> {
            let pose = codebook_view_pose(mesh, rot, f_base);
            Ok(render_depth(mesh, &pose, &intr)?)
        };
        out.push(TrainingTriplet {
            anchor: render(&p.anchor_rot)?,
            rotated: render(&p.rotated_rot)?,
            off_view: render(&p.off_rot)?,
            theta_gt: Rotation::rot_z(p.theta),
            gamma_angle_deg: p.gamma_deg,
            anchor_viewpoint: p.gamma_view,
        });
    }
    Ok(out)
}
