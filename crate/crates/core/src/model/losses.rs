//! Loss functions as plain scalar helpers. Training assembles the same
//! quantities on the tape; these versions serve evaluation and tests.

use super::ModelError;
use crate::geometry::Rotation;
use crate::nn::{Tape, Tensor};
use crate::pipeline::NormalizedCrop;

/// Ranking hinge used by both the viewpoint loss (on embedding cosines) and
/// the verification loss (on consistency scores):
/// `max(s_neg − s_pos + margin, 0)`.
pub fn ranking_loss(s_pos: f64, s_neg: f64, margin: f64) -> f64 {
    (s_neg - s_pos + margin).max(0.0)
}

/// Default ranking margin for both ranking losses.
pub const RANKING_MARGIN: f64 = 0.1;

/// Loss weights (viewpoint, verification, in-plane).
pub const LOSS_WEIGHTS: (f64, f64, f64) = (100.0, 10.0, 1.0);

/// Batch objective: `(1/bs) · Σ (λ₁ℓ_vp + λ₂ℓ_css + λ₃ℓ_θ)`.
pub fn combined_loss_value(parts: &[(f64, f64, f64)], weights: (f64, f64, f64)) -> f64 {
    if parts.is_empty() {
        return 0.0;
    }
    let total: f64 = parts
        .iter()
        .map(|(vp, css, theta)| weights.0 * vp + weights.1 * css + weights.2 * theta)
        .sum();
    total / parts.len() as f64
}

/// In-plane image discrepancy: rotate the depth crop by the predicted and
/// ground-truth in-plane rotations, compare the flattened images by cosine
/// similarity, and return `−log((1 + S_cos) / 2)`.
///
/// Zero exactly when the transformed images are proportional with a positive
/// factor; an all-zero crop is an error.
pub fn inplane_image_loss(
    crop: &NormalizedCrop,
    r_pred: &Rotation,
    r_gt: &Rotation,
) -> Result<f64, ModelError> {
    if crop.values.iter().all(|&v| v == 0.0) {
        return Err(ModelError::InvalidArgument(
            "in-plane loss needs a nonzero depth crop".into(),
        ));
    }
    let s = crop.size as usize;
    let img = Tensor::<f64>::from_vec(
        &[1, 1, s, s],
        crop.values.iter().map(|&v| f64::from(v)).collect(),
    )
    .map_err(ModelError::Nn)?;
    let theta_of = |r: &Rotation| {
        let a = r.inplane_angle_rad();
        Tensor::<f64>::from_vec(&[1, 2], vec![a.cos(), a.sin()]).expect("theta tensor")
    };
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(img, false).map_err(ModelError::Nn)?;
    let tp = tape.leaf(theta_of(r_pred), false).map_err(ModelError::Nn)?;
    let tg = tape.leaf(theta_of(r_gt), false).map_err(ModelError::Nn)?;
    let rp = tape.rotate2d(x, tp).map_err(ModelError::Nn)?;
    let rg = tape.rotate2d(x, tg).map_err(ModelError::Nn)?;
    let fp = tape.flatten_rows(rp).map_err(ModelError::Nn)?;
    let fg = tape.flatten_rows(rg).map_err(ModelError::Nn)?;
    let cs = tape.cosine_rows(fp, fg).map_err(ModelError::Nn)?;
    let l = tape.neg_log_half_plus(cs).map_err(ModelError::Nn)?;
    Ok(tape.value(l).data()[0])
}
