//! Rotation matrices and the in-plane / out-of-plane decomposition.

use nalgebra::{Matrix3, Vector3};

use super::GeometryError;

const ORTHONORMAL_TOL: f64 = 1e-6;

/// A proper rotation matrix (orthonormal, det = +1).
///
/// Maps object coordinates to camera coordinates when used in a [`super::Pose`].
/// The third row is the camera view direction expressed in object coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation {
    m: Matrix3<f64>,
}

impl Rotation {
    pub fn identity() -> Self {
        Self {
            m: Matrix3::identity(),
        }
    }

    /// Validating constructor: requires `RᵀR = I` and `det R = +1` within 1e-6.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        let gram = m.transpose() * m;
        let dev = (gram - Matrix3::identity()).abs().max();
        if dev > ORTHONORMAL_TOL {
            return Err(GeometryError::InvalidArgument(format!(
                "matrix is not orthonormal (max deviation {dev:.2e})"
            )));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(GeometryError::InvalidArgument(format!(
                "matrix determinant is {det}, expected +1"
            )));
        }
        Ok(Self { m })
    }

    /// Constructor for matrices already known to be valid rotations
    /// (compositions of validated rotations, analytic axis rotations).
    pub(crate) fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self { m }
    }

    pub fn rot_x(angle_rad: f64) -> Self {
        let (s, c) = angle_rad.sin_cos();
        Self::from_matrix_unchecked(Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c))
    }

    pub fn rot_y(angle_rad: f64) -> Self {
        let (s, c) = angle_rad.sin_cos();
        Self::from_matrix_unchecked(Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c))
    }

    pub fn rot_z(angle_rad: f64) -> Self {
        let (s, c) = angle_rad.sin_cos();
        Self::from_matrix_unchecked(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn transpose(&self) -> Self {
        Self {
            m: self.m.transpose(),
        }
    }

    /// `self · other` (applies `other` first).
    pub fn compose(&self, other: &Rotation) -> Self {
        Self {
            m: self.m * other.m,
        }
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.m * v
    }

    /// The camera view direction in object coordinates (third row).
    pub fn view_axis(&self) -> Vector3<f64> {
        self.m.row(2).transpose()
    }

    /// The in-plane rotation angle about the camera optical axis, in radians,
    /// of a rotation that fixes the z axis. For general rotations this is the
    /// angle of the in-plane factor's 2×2 block.
    pub fn inplane_angle_rad(&self) -> f64 {
        self.m[(1, 0)].atan2(self.m[(0, 0)])
    }

    /// Row-major flat array, for serialization.
    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.m;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn from_row_major(v: &[f64; 9]) -> Result<Self, GeometryError> {
        Self::from_matrix(Matrix3::new(
            v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8],
        ))
    }
}

/// Geodesic angle between two rotations in degrees:
/// `arccos((trace(aᵀb) − 1) / 2)`, in `[0°, 180°]`.
pub fn geodesic_angle_deg(a: &Rotation, b: &Rotation) -> f64 {
    let t = (a.m.transpose() * b.m).trace();
    let c = ((t - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

/// Build the in-plane rotation matrix from a unit 2-vector `(ϑ₁, ϑ₂)`:
///
/// ```text
/// [ ϑ₁ −ϑ₂ 0 ]
/// [ ϑ₂  ϑ₁ 0 ]
/// [ 0    0 1 ]
/// ```
pub fn inplane_matrix(theta: [f64; 2]) -> Result<Rotation, GeometryError> {
    let norm = (theta[0] * theta[0] + theta[1] * theta[1]).sqrt();
    if norm < 1e-12 {
        return Err(GeometryError::InvalidArgument(
            "in-plane vector must be nonzero".into(),
        ));
    }
    if (norm - 1.0).abs() > 1e-6 {
        return Err(GeometryError::InvalidArgument(format!(
            "in-plane vector must be unit length (|ϑ| = {norm})"
        )));
    }
    let (c, s) = (theta[0], theta[1]);
    Ok(Rotation::from_matrix_unchecked(Matrix3::new(
        c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0,
    )))
}

/// The canonical rotation for a given view direction (unit vector from the
/// camera toward the object, in object coordinates).
///
/// The in-plane component is fixed so the object +z axis projects upward in
/// the image; when the view direction is parallel to ±z the tie is broken by
/// aligning image right with object +x.
pub fn canonical_viewpoint(view_dir: &Vector3<f64>) -> Rotation {
    let w = view_dir.normalize();
    let ez = Vector3::z();
    let u = ez - w * ez.dot(&w);
    let (x_c, y_c) = if u.norm_squared() > 1e-12 {
        // Image up (−y row) aligned with the projection of +z.
        let y_c = -u.normalize();
        let x_c = y_c.cross(&w);
        (x_c, y_c)
    } else {
        let ex = Vector3::x();
        let ux = ex - w * ex.dot(&w);
        let x_c = ux.normalize();
        let y_c = w.cross(&x_c);
        (x_c, y_c)
    };
    let mut m = Matrix3::zeros();
    m.set_row(0, &x_c.transpose());
    m.set_row(1, &y_c.transpose());
    m.set_row(2, &w.transpose());
    Rotation::from_matrix_unchecked(m)
}

/// Factor `r = r_theta · r_gamma` where `r_theta` is a pure rotation about
/// the camera optical axis and `r_gamma` is the canonical viewpoint rotation
/// sharing `r`'s view direction.
///
/// The factorization is exact for every input; at the degenerate view
/// direction (parallel to object ±z) the canonical tie-break applies.
pub fn decompose_rotation(r: &Rotation) -> (Rotation, Rotation) {
    let r_gamma = canonical_viewpoint(&r.view_axis());
    let r_theta = r.compose(&r_gamma.transpose());
    (r_theta, r_gamma)
}
