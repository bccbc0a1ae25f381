//! Render-based location refinement and the hypothesis quality measure.

use nalgebra::Vector3;

use super::preprocess::surface_center_estimate;
use super::PipelineError;
use crate::geometry::{Pose, Rotation, TriangleMesh};
use crate::render::{render_depth, DepthFrame};

/// Refine the initial location for a given orientation estimate.
///
/// Renders the object at `[r_est | t_init]`, measures the surface centroid
/// of the synthetic view with the same estimator preprocessing uses, and
/// cancels the self-occlusion offset: `t_est = 2·t_init − t_syn`.
pub fn refine_location(
    mesh: &TriangleMesh,
    r_est: &Rotation,
    t_init: &Vector3<f64>,
    scene_intrinsics: &crate::geometry::CameraIntrinsics,
    min_mask_px: usize,
) -> Result<Vector3<f64>, PipelineError> {
    let pose = Pose {
        rotation: *r_est,
        translation: *t_init,
    };
    let synth = render_depth(mesh, &pose, scene_intrinsics)?;
    let mask = synth.mask();
    let (t_syn, _, _) = surface_center_estimate(&synth, &mask, min_mask_px)?;
    Ok(2.0 * t_init - t_syn)
}

#[derive(Debug, Clone, Copy)]
pub struct QualityResult {
    /// Outlier-pixel ratio in [0, 1].
    pub q: f64,
    /// Object pixels of the synthetic render that entered the ratio.
    pub pixels: usize,
    /// True when the render had no usable object pixels (q forced to 1).
    pub degenerate: bool,
}

/// Hypothesis quality: the fraction of rendered-object pixels whose depth
/// deviates from the masked observation by more than `0.1 · diameter`.
///
/// Pixels covered by the synthetic render but unobserved in the masked depth
/// count as outliers by default (`count_unobserved`); the alternative
/// excludes them from the ratio entirely.
pub fn hypothesis_quality(
    mesh: &TriangleMesh,
    pose: &Pose,
    observed_masked: &DepthFrame,
    diameter_mm: f64,
    count_unobserved: bool,
) -> Result<QualityResult, PipelineError> {
    let synth = render_depth(mesh, pose, &observed_masked.intrinsics)?;
    let threshold = 0.1 * diameter_mm;
    let mut m_p = 0usize;
    let mut outliers = 0usize;
    for (i, &ds) in synth.depth.iter().enumerate() {
        if ds <= 0.0 {
            continue;
        }
        let dm = observed_masked.depth[i];
        if dm <= 0.0 {
            if count_unobserved {
                m_p += 1;
                outliers += 1;
            }
            continue;
        }
        m_p += 1;
        if (f64::from(ds) - f64::from(dm)).abs() > threshold {
            outliers += 1;
        }
    }
    if m_p == 0 {
        return Ok(QualityResult {
            q: 1.0,
            pixels: 0,
            degenerate: true,
        });
    }
    Ok(QualityResult {
        q: outliers as f64 / m_p as f64,
        pixels: m_p,
        degenerate: false,
    })
}
