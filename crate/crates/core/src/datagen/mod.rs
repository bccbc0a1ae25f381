//! Procedural training data: synthetic shapes, viewpoint triplets and depth
//! augmentations.

mod augment;
pub(crate) mod shapes;
mod triplets;

pub use augment::{augment, AugmentConfig};
pub use shapes::{
    box_mesh, cylinder_mesh, ellipsoid_mesh, generate_shapes, superellipsoid_mesh, ShapeFamily,
    ShapeSpec,
};
pub use triplets::{sample_triplets, TrainingTriplet};

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Error, Debug)]
pub enum DatagenError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("geometry error: {0}")]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error("render error: {0}")]
    Render(#[from] crate::render::RenderError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest parse error: {0}")]
    Manifest(#[from] toml::de::Error),
}

/// One dataset entry: a mesh file plus its generation provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub object_id: String,
    pub mesh_path: PathBuf,
    pub family: String,
    pub seed: u64,
    /// "train" or "heldout".
    pub split: String,
}

/// Index of a generated dataset, stored as structured text for
/// reproducibility.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub root_seed: u64,
    pub entries: Vec<ManifestEntry>,
    /// Free-form notes on parameter interpretations (noise units, occluder
    /// sizing) so runs can be audited later.
    #[serde(default)]
    pub notes: Vec<String>,
}

impl DatasetManifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DatagenError> {
        let text = toml::to_string_pretty(self).expect("serialize manifest");
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatagenError> {
        Ok(toml::from_str(&std::fs::read_to_string(path)?)?)
    }
}
