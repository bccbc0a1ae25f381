//! Rotations, poses, camera intrinsics, triangle meshes and viewpoint
//! sampling.
//!
//! Conventions used throughout the crate:
//!
//! - Poses map object coordinates to camera coordinates: `x_cam = R x + t`.
//! - The camera looks along +z, image x points right, image y points down.
//! - Angles are radians internally and degrees in reports; translations and
//!   mesh coordinates are millimeters.

mod kdtree;
mod mesh;
mod mesh_io;
mod rotation;
mod sampling;

pub use kdtree::KdTree3;
pub use mesh::TriangleMesh;
pub use mesh_io::{load_mesh, save_mesh, MeshFormat};
pub use rotation::{
    canonical_viewpoint, decompose_rotation, geodesic_angle_deg, inplane_matrix, Rotation,
};
pub use sampling::{sample_viewpoints, view_direction_aavd_deg};

use nalgebra::Vector3;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum GeometryError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// A rigid transform from object coordinates to camera coordinates, in
/// millimeters.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidArgument(
                "pose translation must be finite".into(),
            ));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Rotation::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Apply the pose to an object-frame point.
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    /// The inverse transform (camera frame to object frame).
    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        let t = -rt.rotate(&self.translation);
        Pose {
            rotation: rt,
            translation: t,
        }
    }

    /// Composition `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }
}

/// Pinhole camera intrinsics in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub px: f64,
    pub py: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        px: f64,
        py: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(GeometryError::InvalidArgument(
                "focal lengths must be positive".into(),
            ));
        }
        if !(px >= 0.0 && px <= f64::from(width) && py >= 0.0 && py <= f64::from(height)) {
            return Err(GeometryError::InvalidArgument(
                "principal point must lie inside the image".into(),
            ));
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidArgument(
                "image size must be nonzero".into(),
            ));
        }
        Ok(Self {
            fx,
            fy,
            px,
            py,
            width,
            height,
        })
    }

    /// Project a camera-frame point to continuous pixel coordinates.
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (
            self.fx * p.x / p.z + self.px,
            self.fy * p.y / p.z + self.py,
        )
    }

    /// Back-project continuous pixel coordinates at depth `z` (mm) to a
    /// camera-frame point: `z · K⁻¹ [u, v, 1]ᵀ`.
    pub fn back_project(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        Vector3::new((u - self.px) / self.fx * z, (v - self.py) / self.fy * z, z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn pose_roundtrip_inverse() {
        let r = Rotation::rot_z(0.7).compose(&Rotation::rot_x(-0.3));
        let pose = Pose::new(r, Vector3::new(10.0, -4.0, 900.0)).unwrap();
        let p = Vector3::new(13.0, 5.0, -2.0);
        let back = pose.inverse().transform_point(&pose.transform_point(&p));
        assert_relative_eq!(back, p, epsilon = 1e-9);
    }

    #[test]
    fn pose_rejects_non_finite_translation() {
        let r = Rotation::identity();
        assert!(Pose::new(r, Vector3::new(f64::NAN, 0.0, 0.0)).is_err());
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).is_ok());
        assert!(CameraIntrinsics::new(-1.0, 500.0, 320.0, 240.0, 640, 480).is_err());
        assert!(CameraIntrinsics::new(500.0, 500.0, 900.0, 240.0, 640, 480).is_err());
    }

    #[test]
    fn project_back_project_roundtrip() {
        let k = CameraIntrinsics::new(525.0, 520.0, 319.5, 239.5, 640, 480).unwrap();
        let p = Vector3::new(55.0, -20.0, 1200.0);
        let (u, v) = k.project(&p);
        assert_relative_eq!(k.back_project(u, v, p.z), p, epsilon = 1e-9);
    }
}
