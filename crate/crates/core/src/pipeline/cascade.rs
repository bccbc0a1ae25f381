//! The full estimation cascade for one masked depth frame.

use std::time::Instant;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::icp::{icp_refine, mask_to_points, subsample_points};
use super::preprocess::preprocess;
use super::quality::{hypothesis_quality, refine_location};
use super::{EstimateConfig, IcpMode, PipelineError, PoseHypothesis};
use crate::codebook::ViewpointCodebook;
use crate::geometry::{inplane_matrix, Pose, TriangleMesh};
use crate::model::Network;
use crate::render::{render_codebook_view, DepthFrame, MaskFrame, DEFAULT_CROP_FACTOR};

/// Wall-clock per stage, milliseconds. Reported, never asserted.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub preprocess_ms: f64,
    pub encode_ms: f64,
    pub retrieval_ms: f64,
    pub candidates_ms: f64,
    pub refinement_ms: f64,
    pub icp_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone)]
pub struct EstimateResult {
    pub best: PoseHypothesis,
    /// All P scored proposals, in verification order.
    pub proposals: Vec<PoseHypothesis>,
    pub t_init: Vector3<f64>,
    pub timings: StageTimings,
}

/// Pose output record written by the CLI (structured text).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub object_id: String,
    pub rotation_row_major: Vec<f64>,
    pub translation_mm: [f64; 3],
    pub quality_q: f64,
    pub verify_score: f64,
    pub source_rank: usize,
    pub timings: StageTimings,
}

impl PoseRecord {
    pub fn from_result(object_id: &str, res: &EstimateResult) -> Self {
        Self {
            object_id: object_id.to_string(),
            rotation_row_major: res.best.rotation.to_row_major().to_vec(),
            translation_mm: [
                res.best.translation.x,
                res.best.translation.y,
                res.best.translation.z,
            ],
            quality_q: res.best.quality_q,
            verify_score: res.best.verify_score,
            source_rank: res.best.source_rank,
            timings: res.timings.clone(),
        }
    }
}

/// The observed depth restricted to the mask (all other pixels zero).
fn masked_depth(depth: &DepthFrame, mask: &MaskFrame) -> DepthFrame {
    let mut out = depth.clone();
    for (d, &m) in out.depth.iter_mut().zip(&mask.bits) {
        if !m {
            *d = 0.0;
        }
    }
    out
}

/// Select the proposal with the lowest quality q; ties go to the higher
/// verification score, then to the lower retrieval rank.
pub(crate) fn select_best(proposals: &[PoseHypothesis]) -> usize {
    let mut best = 0usize;
    for i in 1..proposals.len() {
        let a = &proposals[i];
        let b = &proposals[best];
        let better = a.quality_q < b.quality_q
            || (a.quality_q == b.quality_q && a.verify_score > b.verify_score)
            || (a.quality_q == b.quality_q
                && a.verify_score == b.verify_score
                && a.source_rank < b.source_rank);
        if better {
            best = i;
        }
    }
    best
}

/// Run the cascade: preprocess, retrieve K viewpoint candidates, regress the
/// in-plane rotation per candidate, verify, keep the top P, refine each
/// proposal's location, score with the outlier ratio and return the argmin,
/// with ICP off, after selection, or on every proposal before selection.
pub fn estimate_pose(
    net: &Network<f32>,
    codebook: &ViewpointCodebook,
    mesh: &TriangleMesh,
    depth: &DepthFrame,
    mask: &MaskFrame,
    cfg: &EstimateConfig,
) -> Result<EstimateResult, PipelineError> {
    cfg.validate()?;
    if codebook.len() < cfg.k_retrieval {
        return Err(PipelineError::InvalidConfig(format!(
            "K = {} exceeds codebook size {}",
            cfg.k_retrieval,
            codebook.len()
        )));
    }
    let t_start = Instant::now();
    let mut timings = StageTimings::default();
    let diameter = codebook.diameter_mm();

    let t0 = Instant::now();
    let pre = preprocess(depth, mask, diameter, cfg.crop_factor, cfg.min_mask_px)?;
    let observed = masked_depth(depth, mask);
    timings.preprocess_ms = t0.elapsed().as_secs_f64() * 1e3;

    let t0 = Instant::now();
    let real = net.encode_one(&pre.crop)?;
    timings.encode_ms = t0.elapsed().as_secs_f64() * 1e3;

    let t0 = Instant::now();
    let retrieved = codebook
        .retrieve(&real.embedding, cfg.k_retrieval)
        .map_err(|e| PipelineError::EstimationFailure(e.to_string()))?;
    timings.retrieval_ms = t0.elapsed().as_secs_f64() * 1e3;

    // Render + encode every candidate view, regress the in-plane rotation
    // against the observation and verify the composed orientation.
    let t0 = Instant::now();
    let candidate_crops: Vec<Option<crate::pipeline::NormalizedCrop>> = retrieved
        .par_iter()
        .map(|(rec_idx, _)| {
            let vp = &codebook.records()[*rec_idx].rotation;
            let frame = render_codebook_view(mesh, vp, cfg.f_base).ok()?;
            preprocess(&frame, &frame.mask(), diameter, DEFAULT_CROP_FACTOR, cfg.min_mask_px)
                .ok()
                .map(|p| p.crop)
        })
        .collect();
    let usable: Vec<(usize, &crate::pipeline::NormalizedCrop)> = candidate_crops
        .iter()
        .enumerate()
        .filter_map(|(rank, c)| c.as_ref().map(|c| (rank, c)))
        .collect();
    if usable.is_empty() {
        return Err(PipelineError::EstimationFailure(
            "no retrieved candidate could be rendered".into(),
        ));
    }
    let encoded = net.encode_batch(&usable.iter().map(|(_, c)| *c).collect::<Vec<_>>())?;
    let pairs: Vec<(&crate::nn::Tensor<f32>, &crate::nn::Tensor<f32>)> = encoded
        .iter()
        .map(|e| (&e.feature_map, &real.feature_map))
        .collect();
    let thetas = net.regress_inplane_batch(&pairs)?;
    let verify_items: Vec<(&crate::nn::Tensor<f32>, [f32; 2], &crate::nn::Tensor<f32>)> = encoded
        .iter()
        .zip(&thetas)
        .map(|(e, th)| (&e.feature_map, *th, &real.feature_map))
        .collect();
    let scores = net.verify_candidates_batch(&verify_items)?;
    timings.candidates_ms = t0.elapsed().as_secs_f64() * 1e3;

    // Compose full orientations and keep the top P by verification score.
    struct Candidate {
        rank: usize,
        rotation: crate::geometry::Rotation,
        score: f64,
    }
    let mut candidates = Vec::with_capacity(usable.len());
    for (i, (rank, _)) in usable.iter().enumerate() {
        let rec = &codebook.records()[retrieved[*rank].0];
        let th = thetas[i];
        let norm = (f64::from(th[0]).powi(2) + f64::from(th[1]).powi(2)).sqrt();
        let theta_unit = [f64::from(th[0]) / norm, f64::from(th[1]) / norm];
        let r_theta = inplane_matrix(theta_unit)
            .map_err(|e| PipelineError::EstimationFailure(e.to_string()))?;
        candidates.push(Candidate {
            rank: *rank,
            rotation: r_theta.compose(&rec.rotation),
            score: f64::from(scores[i]),
        });
    }
    candidates.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.rank.cmp(&b.rank))
    });
    candidates.truncate(cfg.p_proposals);

    // Location refinement and quality scoring per proposal; ICP first when
    // configured to run before selection.
    let t0 = Instant::now();
    let scene_cloud = if cfg.icp == IcpMode::Off {
        Vec::new()
    } else {
        subsample_points(
            &mask_to_points(depth, mask, &depth.intrinsics)?,
            cfg.max_cloud_points,
        )
    };
    let model_cloud = subsample_points(mesh.vertices(), cfg.max_cloud_points);

    let mut icp_ms = 0.0;
    let mut proposals: Vec<PoseHypothesis> = Vec::with_capacity(candidates.len());
    for c in &candidates {
        let t_est = match refine_location(mesh, &c.rotation, &pre.t_init, &depth.intrinsics, cfg.min_mask_px) {
            Ok(t) => t,
            Err(_) => pre.t_init, // off-frame render; keep the initial estimate
        };
        let mut pose = Pose {
            rotation: c.rotation,
            translation: t_est,
        };
        if cfg.icp == IcpMode::BeforeSelection {
            let t_icp = Instant::now();
            let res = icp_refine(&model_cloud, &scene_cloud, &pose, cfg.icp_max_iters, cfg.icp_tol_mm)?;
            icp_ms += t_icp.elapsed().as_secs_f64() * 1e3;
            pose = res.pose;
        }
        let quality = hypothesis_quality(
            mesh,
            &pose,
            &observed,
            diameter,
            cfg.count_unobserved_as_outliers,
        )?;
        proposals.push(PoseHypothesis {
            rotation: pose.rotation,
            translation: pose.translation,
            verify_score: c.score,
            quality_q: quality.q,
            source_rank: c.rank,
            degenerate_quality: quality.degenerate,
        });
    }
    timings.refinement_ms = t0.elapsed().as_secs_f64() * 1e3 - icp_ms;

    let best_idx = select_best(&proposals);
    let mut best = proposals[best_idx].clone();

    if cfg.icp == IcpMode::AfterSelection {
        let t_icp = Instant::now();
        let pose = Pose {
            rotation: best.rotation,
            translation: best.translation,
        };
        let res = icp_refine(&model_cloud, &scene_cloud, &pose, cfg.icp_max_iters, cfg.icp_tol_mm)?;
        if !res.skipped {
            best.rotation = res.pose.rotation;
            best.translation = res.pose.translation;
            let q = hypothesis_quality(
                mesh,
                &res.pose,
                &observed,
                diameter,
                cfg.count_unobserved_as_outliers,
            )?;
            best.quality_q = q.q;
            best.degenerate_quality = q.degenerate;
        }
        icp_ms += t_icp.elapsed().as_secs_f64() * 1e3;
    }
    timings.icp_ms = icp_ms;
    timings.total_ms = t_start.elapsed().as_secs_f64() * 1e3;

    Ok(EstimateResult {
        best,
        proposals,
        t_init: pre.t_init,
        timings,
    })
}
