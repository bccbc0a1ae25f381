//! The inference cascade: preprocessing, viewpoint retrieval, in-plane
//! regression, verification, location refinement, hypothesis selection and
//! optional ICP refinement.

mod cascade;
mod icp;
mod preprocess;
mod quality;

pub use cascade::{estimate_pose, EstimateResult, PoseRecord, StageTimings};
pub use icp::{icp_refine, mask_to_points, subsample_points, IcpResult};
pub use preprocess::{preprocess, surface_center_estimate, NormalizedCrop, Preprocessed};
pub use quality::{hypothesis_quality, refine_location, QualityResult};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Rotation;

#[derive(Error, Debug)]
pub enum PipelineError {
    #[error("no object: mask has {found} valid pixels, need {needed}")]
    NoObject { found: usize, needed: usize },
    #[error("invalid depth: mask contains no valid depth values")]
    InvalidDepth,
    #[error("estimation failure: {0}")]
    EstimationFailure(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("geometry error: {0}")]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error("render error: {0}")]
    Render(#[from] crate::render::RenderError),
    #[error("network error: {0}")]
    Nn(#[from] crate::nn::NnError),
    #[error("model error: {0}")]
    Model(#[from] crate::model::ModelError),
}

/// When ICP runs relative to hypothesis selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IcpMode {
    Off,
    AfterSelection,
    BeforeSelection,
}

/// Cascade configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimateConfig {
    /// Codebook size the cascade expects (N).
    pub n_views: usize,
    /// Retrieved viewpoint candidates (K).
    pub k_retrieval: usize,
    /// Orientation proposals kept after verification (P).
    pub p_proposals: usize,
    pub icp: IcpMode,
    pub f_base: f64,
    /// Crop side length as a multiple of the projected object diameter.
    pub crop_factor: f64,
    /// Minimum valid mask pixels for preprocessing.
    pub min_mask_px: usize,
    /// Count synthetic-footprint pixels unobserved in the masked depth as
    /// outliers in the hypothesis quality (the alternative excludes them).
    pub count_unobserved_as_outliers: bool,
    pub icp_max_iters: usize,
    pub icp_tol_mm: f64,
    /// Point budget for ICP clouds (scene and model).
    pub max_cloud_points: usize,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            n_views: 4000,
            k_retrieval: 50,
            p_proposals: 5,
            icp: IcpMode::Off,
            f_base: 5.0,
            crop_factor: crate::render::DEFAULT_CROP_FACTOR,
            min_mask_px: 50,
            count_unobserved_as_outliers: true,
            icp_max_iters: 30,
            icp_tol_mm: 1e-3,
            max_cloud_points: 5000,
        }
    }
}

impl EstimateConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(1 <= self.p_proposals && self.p_proposals <= self.k_retrieval
            && self.k_retrieval <= self.n_views)
        {
            return Err(PipelineError::InvalidConfig(format!(
                "need 1 <= P ({}) <= K ({}) <= N ({})",
                self.p_proposals, self.k_retrieval, self.n_views
            )));
        }
        if !(self.f_base > 0.0 && self.crop_factor > 0.0) {
            return Err(PipelineError::InvalidConfig(
                "f_base and crop_factor must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One scored orientation/translation hypothesis.
#[derive(Debug, Clone)]
pub struct PoseHypothesis {
    pub rotation: Rotation,
    pub translation: nalgebra::Vector3<f64>,
    pub verify_score: f64,
    /// Outlier-pixel ratio in [0, 1]; lower is better.
    pub quality_q: f64,
    /// Retrieval rank (0 = most similar codebook entry).
    pub source_rank: usize,
    /// Set when the quality render had no object pixels.
    pub degenerate_quality: bool,
}
