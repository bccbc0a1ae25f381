//! Held-out evaluation helpers for the trained network.

use super::network::Network;
use super::ModelError;
use crate::pipeline::NormalizedCrop;

/// Fraction of triplets where the anchor is closer (by embedding cosine) to
/// its in-plane-rotated view than to the off-viewpoint view.
pub fn triplet_ranking_accuracy(
    net: &Network<f32>,
    triplets: &[(NormalizedCrop, NormalizedCrop, NormalizedCrop)],
) -> Result<f64, ModelError> {
    if triplets.is_empty() {
        return Err(ModelError::InvalidArgument("no triplets".into()));
    }
    let mut correct = 0usize;
    for chunk in triplets.chunks(16) {
        let mut crops = Vec::with_capacity(chunk.len() * 3);
        for (a, t, g) in chunk {
            crops.extend([a, t, g]);
        }
        let encoded = net.encode_batch(&crops)?;
        for i in 0..chunk.len() {
            let a = &encoded[i * 3].embedding;
            let t = &encoded[i * 3 + 1].embedding;
            let g = &encoded[i * 3 + 2].embedding;
            let dot = |x: &[f32], y: &[f32]| -> f64 {
                x.iter()
                    .zip(y)
                    .map(|(p, q)| f64::from(*p) * f64::from(*q))
                    .sum()
            };
            if dot(a, t) > dot(a, g) {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / triplets.len() as f64)
}

/// Angle of a regressed in-plane unit vector, degrees in [0°, 360°).
pub fn predicted_angle_deg(theta: [f32; 2]) -> f64 {
    let a = f64::from(theta[1]).atan2(f64::from(theta[0])).to_degrees();
    if a < 0.0 {
        a + 360.0
    } else {
        a
    }
}

/// Absolute angular error between a regressed in-plane rotation and the
/// ground-truth angle, wrapped to [0°, 180°].
pub fn inplane_prediction_error_deg(
    net: &Network<f32>,
    from: &NormalizedCrop,
    to: &NormalizedCrop,
    gt_angle_deg: f64,
) -> Result<f64, ModelError> {
    let enc = net.encode_batch(&[from, to])?;
    let theta = net.regress_inplane_pair(&enc[0].feature_map, &enc[1].feature_map)?;
    let pred = predicted_angle_deg(theta);
    let mut diff = (pred - gt_angle_deg).rem_euclid(360.0);
    if diff > 180.0 {
        diff = 360.0 - diff;
    }
    Ok(diff)
}
