//! CPU depth rendering: a z-buffered triangle rasterizer producing
//! noise-free depth images and masks, plus depth-image file I/O.
//!
//! Depth values are the camera-frame z coordinate of the nearest surface in
//! millimeters; pixels with no hit hold 0. Pixel (col, row) is sampled at the
//! continuous image point (col + 0.5, row + 0.5).

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, GeometryError, Pose, Rotation, TriangleMesh};

/// Near clip plane (mm).
pub const NEAR_CLIP_MM: f64 = 1.0;
/// Far clip plane (mm).
pub const FAR_CLIP_MM: f64 = 10_000.0;

/// Side length of codebook renders and network input crops, in pixels.
pub const CROP_SIZE: u32 = 128;
/// Crop side length as a multiple of the projected object diameter.
pub const DEFAULT_CROP_FACTOR: f64 = 1.5;

#[derive(Error, Debug)]
pub enum RenderError {
    #[error("object is entirely behind the near clip plane")]
    EmptyFrame,
    #[error("geometry error: {0}")]
    Geometry(#[from] GeometryError),
    #[error("depth file format error ({path}): {message}")]
    Format { path: String, message: String },
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Meta(#[from] toml::de::Error),
}

/// A depth image in millimeters; 0 marks pixels with no surface hit.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthFrame {
    pub width: u32,
    pub height: u32,
    pub depth: Vec<f32>,
    pub intrinsics: CameraIntrinsics,
}

impl DepthFrame {
    pub fn new(
        width: u32,
        height: u32,
        depth: Vec<f32>,
        intrinsics: CameraIntrinsics,
    ) -> Result<Self, RenderError> {
        if depth.len() != (width as usize) * (height as usize) {
            return Err(RenderError::Format {
                path: String::new(),
                message: format!(
                    "depth grid has {} values for a {width}x{height} frame",
                    depth.len()
                ),
            });
        }
        Ok(Self {
            width,
            height,
            depth,
            intrinsics,
        })
    }

    #[inline]
    pub fn at(&self, x: u32, y: u32) -> f32 {
        self.depth[(y * self.width + x) as usize]
    }

    /// The boolean mask of hit pixels (depth > 0).
    pub fn mask(&self) -> MaskFrame {
        MaskFrame {
            width: self.width,
            height: self.height,
            bits: self.depth.iter().map(|&d| d > 0.0).collect(),
        }
    }

    pub fn covered_pixels(&self) -> usize {
        self.depth.iter().filter(|&&d| d > 0.0).count()
    }
}

/// A boolean pixel grid paired with a [`DepthFrame`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskFrame {
    pub width: u32,
    pub height: u32,
    pub bits: Vec<bool>,
}

impl MaskFrame {
    #[inline]
    pub fn at(&self, x: u32, y: u32) -> bool {
        self.bits[(y * self.width + x) as usize]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Bounding box (x0, y0, x1, y1) of set pixels, inclusive; `None` when
    /// the mask is empty.
    pub fn bounding_box(&self) -> Option<(u32, u32, u32, u32)> {
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0u32, 0u32);
        let mut any = false;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.at(x, y) {
                    any = true;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        any.then_some((x0, y0, x1, y1))
    }
}

/// Render the mesh depth under `pose` (object to camera, mm).
///
/// Perspective projection with z-buffering; the stored value is the
/// camera-frame z of the nearest surface per pixel. Triangles touching the
/// near clip are dropped; an object entirely behind the near plane is an
/// error.
pub fn render_depth(
    mesh: &TriangleMesh,
    pose: &Pose,
    intr: &CameraIntrinsics,
) -> Result<DepthFrame, RenderError> {
    let cam: Vec<Vector3<f64>> = mesh
        .vertices()
        .iter()
        .map(|v| pose.transform_point(v))
        .collect();
    if cam.iter().all(|p| p.z <= NEAR_CLIP_MM) {
        return Err(RenderError::EmptyFrame);
    }

    let w = intr.width as usize;
    let h = intr.height as usize;
    let mut zbuf = vec![f64::INFINITY; w * h];

    // Projected vertices and inverse depths.
    let proj: Vec<(f64, f64, f64)> = cam
        .iter()
        .map(|p| {
            if p.z > NEAR_CLIP_MM {
                let (u, v) = intr.project(p);
                (u, v, 1.0 / p.z)
            } else {
                (f64::NAN, f64::NAN, f64::NAN)
            }
        })
        .collect();

    for face in mesh.faces() {
        let (a, b, c) = (
            proj[face[0] as usize],
            proj[face[1] as usize],
            proj[face[2] as usize],
        );
        if a.0.is_nan() || b.0.is_nan() || c.0.is_nan() {
            continue; // crosses the near plane
        }
        rasterize_triangle(a, b, c, w, h, &mut zbuf);
    }

    let depth: Vec<f32> = zbuf
        .iter()
        .map(|&z| {
            if z.is_finite() && z > NEAR_CLIP_MM && z < FAR_CLIP_MM {
                z as f32
            } else {
                0.0
            }
        })
        .collect();
    DepthFrame::new(intr.width, intr.height, depth, intr.clone())
}

/// Render the mask of covered pixels: true exactly where depth > 0.
pub fn render_mask(
    mesh: &TriangleMesh,
    pose: &Pose,
    intr: &CameraIntrinsics,
) -> Result<MaskFrame, RenderError> {
    Ok(render_depth(mesh, pose, intr)?.mask())
}

#[inline]
fn edge(ax: f64, ay: f64, bx: f64, by: f64, px: f64, py: f64) -> f64 {
    (bx - ax) * (py - ay) - (by - ay) * (px - ax)
}

/// Edge inclusivity under the top-left fill rule (image y points down):
/// top edges run rightward at constant y, left edges run upward.
#[inline]
fn is_top_left(ax: f64, ay: f64, bx: f64, by: f64) -> bool {
    (ay == by && bx > ax) || by < ay
}

fn rasterize_triangle(
    a: (f64, f64, f64),
    b: (f64, f64, f64),
    c: (f64, f64, f64),
    w: usize,
    h: usize,
    zbuf: &mut [f64],
) {
    let (p0, mut p1, mut p2) = (a, b, c);
    let mut area2 = edge(p0.0, p0.1, p1.0, p1.1, p2.0, p2.1);
    if area2 == 0.0 {
        return;
    }
    if area2 < 0.0 {
        std::mem::swap(&mut p1, &mut p2);
        area2 = -area2;
    }

    let min_x = p0.0.min(p1.0).min(p2.0);
    let max_x = p0.0.max(p1.0).max(p2.0);
    let min_y = p0.1.min(p1.1).min(p2.1);
    let max_y = p0.1.max(p1.1).max(p2.1);
    if min_x - 0.5 > (w - 1) as f64 || min_y - 0.5 > (h - 1) as f64 || max_x < 0.5 || max_y < 0.5 {
        return;
    }
    // Pixel index range whose centers can fall inside the bbox.
    let x0 = (min_x - 0.5).ceil().max(0.0) as usize;
    let y0 = (min_y - 0.5).ceil().max(0.0) as usize;
    let x1 = ((max_x - 0.5).floor().max(0.0) as usize).min(w - 1);
    let y1 = ((max_y - 0.5).floor().max(0.0) as usize).min(h - 1);

    let tl0 = is_top_left(p1.0, p1.1, p2.0, p2.1);
    let tl1 = is_top_left(p2.0, p2.1, p0.0, p0.1);
    let tl2 = is_top_left(p0.0, p0.1, p1.0, p1.1);

    for y in y0..=y1 {
        let py = y as f64 + 0.5;
        for x in x0..=x1 {
            let px = x as f64 + 0.5;
            let w0 = edge(p1.0, p1.1, p2.0, p2.1, px, py);
            let w1 = edge(p2.0, p2.1, p0.0, p0.1, px, py);
            let w2 = edge(p0.0, p0.1, p1.0, p1.1, px, py);
            let inside = (w0 > 0.0 || (w0 == 0.0 && tl0))
                && (w1 > 0.0 || (w1 == 0.0 && tl1))
                && (w2 > 0.0 || (w2 == 0.0 && tl2));
            if !inside {
                continue;
            }
            // 1/z is affine in screen space, so interpolate it barycentrically.
            let inv_z = (w0 * p0.2 + w1 * p1.2 + w2 * p2.2) / area2;
            if inv_z <= 0.0 {
                continue;
            }
            let z = 1.0 / inv_z;
            let idx = y * w + x;
            if z < zbuf[idx] {
                zbuf[idx] = z;
            }
        }
    }
}

/// Canonical intrinsics for codebook renders at distance `f_base · diameter`:
/// the focal length is chosen so the projected object diameter spans
/// `CROP_SIZE / DEFAULT_CROP_FACTOR` pixels, matching the preprocessing crop.
pub fn codebook_intrinsics(f_base: f64) -> CameraIntrinsics {
    let f = f64::from(CROP_SIZE) / DEFAULT_CROP_FACTOR * f_base;
    let c = f64::from(CROP_SIZE) / 2.0;
    CameraIntrinsics::new(f, f, c, c, CROP_SIZE, CROP_SIZE).expect("canonical intrinsics")
}

/// Pose placing the mesh's bounding-box center at distance
/// `f_base · diameter` along the optical axis under `viewpoint`.
pub fn codebook_view_pose(mesh: &TriangleMesh, viewpoint: &Rotation, f_base: f64) -> Pose {
    let dist = f_base * mesh.diameter();
    let center = mesh.aabb_center();
    let t = Vector3::new(0.0, 0.0, dist) - viewpoint.rotate(&center);
    Pose {
        rotation: *viewpoint,
        translation: t,
    }
}

/// Render a codebook view: camera on the sphere of radius
/// `f_base · diameter` along the viewpoint's view axis, object centered, at
/// the canonical codebook resolution.
pub fn render_codebook_view(
    mesh: &TriangleMesh,
    viewpoint: &Rotation,
    f_base: f64,
) -> Result<DepthFrame, RenderError> {
    if !(f_base > 0.0) {
        return Err(RenderError::Geometry(GeometryError::InvalidArgument(
            "f_base must be positive".into(),
        )));
    }
    let intr = codebook_intrinsics(f_base);
    let pose = codebook_view_pose(mesh, viewpoint, f_base);
    render_depth(mesh, &pose, &intr)
}

/// Reference ray-casting depth for one pixel: the camera-frame z of the
/// nearest intersection of the pixel-center ray with the mesh, or `None`
/// when the ray misses. Kept as a slow oracle for verifying the rasterizer.
pub fn raycast_depth_at_pixel(
    mesh: &TriangleMesh,
    pose: &Pose,
    intr: &CameraIntrinsics,
    x: u32,
    y: u32,
) -> Option<f64> {
    let dir = Vector3::new(
        (f64::from(x) + 0.5 - intr.px) / intr.fx,
        (f64::from(y) + 0.5 - intr.py) / intr.fy,
        1.0,
    );
    let cam: Vec<Vector3<f64>> = mesh
        .vertices()
        .iter()
        .map(|v| pose.transform_point(v))
        .collect();
    let mut best: Option<f64> = None;
    for f in mesh.faces() {
        let (v0, v1, v2) = (cam[f[0] as usize], cam[f[1] as usize], cam[f[2] as usize]);
        if let Some(t) = ray_triangle(&dir, &v0, &v1, &v2) {
            // dir.z == 1, so the ray parameter equals the camera z.
            if t > NEAR_CLIP_MM && t < FAR_CLIP_MM && best.map_or(true, |b| t < b) {
                best = Some(t);
            }
        }
    }
    best
}

/// Number of front-facing ray hits through the pixel center (for
/// watertightness checks).
pub fn raycast_front_hits(
    mesh: &TriangleMesh,
    pose: &Pose,
    intr: &CameraIntrinsics,
    x: u32,
    y: u32,
) -> usize {
    let dir = Vector3::new(
        (f64::from(x) + 0.5 - intr.px) / intr.fx,
        (f64::from(y) + 0.5 - intr.py) / intr.fy,
        1.0,
    );
    let cam: Vec<Vector3<f64>> = mesh
        .vertices()
        .iter()
        .map(|v| pose.transform_point(v))
        .collect();
    let mut hits = 0;
    for f in mesh.faces() {
        let (v0, v1, v2) = (cam[f[0] as usize], cam[f[1] as usize], cam[f[2] as usize]);
        if let Some(t) = ray_triangle(&dir, &v0, &v1, &v2) {
            if t > NEAR_CLIP_MM && t < FAR_CLIP_MM {
                let n = (v1 - v0).cross(&(v2 - v0));
                if n.dot(&dir) < 0.0 {
                    hits += 1;
                }
            }
        }
    }
    hits
}

// Möller–Trumbore intersection of the ray `t·dir` (origin at the camera).
fn ray_triangle(
    dir: &Vector3<f64>,
    v0: &Vector3<f64>,
    v1: &Vector3<f64>,
    v2: &Vector3<f64>,
) -> Option<f64> {
    let e1 = v1 - v0;
    let e2 = v2 - v0;
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-16 {
        return None;
    }
    let inv = 1.0 / det;
    let s = -v0;
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > 0.0).then_some(t)
}

/// Normalized histogram of the nonzero depth values.
pub fn depth_histogram(frame: &DepthFrame, bins: usize) -> Vec<f64> {
    let vals: Vec<f32> = frame.depth.iter().copied().filter(|&d| d > 0.0).collect();
    let mut hist = vec![0.0; bins];
    if vals.is_empty() {
        return hist;
    }
    let lo = vals.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    let hi = vals.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let span = (hi - lo).max(1e-9);
    for v in &vals {
        let b = (((f64::from(*v) - lo) / span) * bins as f64) as usize;
        hist[b.min(bins - 1)] += 1.0;
    }
    let total = vals.len() as f64;
    for h in hist.iter_mut() {
        *h /= total;
    }
    hist
}

// ---------------------------------------------------------------------------
// File I/O
// ---------------------------------------------------------------------------

/// Sidecar metadata stored next to depth/mask PNGs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthMeta {
    pub fx: f64,
    pub fy: f64,
    pub px: f64,
    pub py: f64,
    pub width: u32,
    pub height: u32,
    /// Millimeters per stored PNG unit.
    pub scale_mm_per_unit: f64,
}

impl DepthMeta {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics, GeometryError> {
        CameraIntrinsics::new(self.fx, self.fy, self.px, self.py, self.width, self.height)
    }
}

/// Sidecar path for a depth/mask image: same stem with `.toml`.
pub fn sidecar_path(image_path: &Path) -> PathBuf {
    image_path.with_extension("toml")
}

/// Save a depth frame as 16-bit grayscale PNG (value = millimeters rounded,
/// saturating at 65535) plus an intrinsics sidecar.
pub fn save_depth_png(frame: &DepthFrame, path: impl AsRef<Path>) -> Result<(), RenderError> {
    let path = path.as_ref();
    let data: Vec<u16> = frame
        .depth
        .iter()
        .map(|&d| d.round().clamp(0.0, 65535.0) as u16)
        .collect();
    let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(
        frame.width,
        frame.height,
        data,
    )
    .expect("sized buffer");
    img.save(path)?;
    let meta = DepthMeta {
        fx: frame.intrinsics.fx,
        fy: frame.intrinsics.fy,
        px: frame.intrinsics.px,
        py: frame.intrinsics.py,
        width: frame.width,
        height: frame.height,
        scale_mm_per_unit: 1.0,
    };
    std::fs::write(
        sidecar_path(path),
        toml::to_string(&meta).expect("serialize meta"),
    )?;
    Ok(())
}

/// Load a 16-bit depth PNG and its sidecar.
pub fn load_depth_png(path: impl AsRef<Path>) -> Result<DepthFrame, RenderError> {
    let path = path.as_ref();
    let meta: DepthMeta = toml::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    let img = image::open(path)?.into_luma16();
    if img.width() != meta.width || img.height() != meta.height {
        return Err(RenderError::Format {
            path: path.display().to_string(),
            message: format!(
                "PNG size {}x{} does not match sidecar {}x{}",
                img.width(),
                img.height(),
                meta.width,
                meta.height
            ),
        });
    }
    let depth: Vec<f32> = img
        .pixels()
        .map(|p| (f64::from(p.0[0]) * meta.scale_mm_per_unit) as f32)
        .collect();
    DepthFrame::new(meta.width, meta.height, depth, meta.intrinsics()?)
}

/// Save a mask as 16-bit grayscale PNG (0 / 65535).
pub fn save_mask_png(mask: &MaskFrame, path: impl AsRef<Path>) -> Result<(), RenderError> {
    let data: Vec<u16> = mask
        .bits
        .iter()
        .map(|&b| if b { 65535 } else { 0 })
        .collect();
    let img =
        image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(mask.width, mask.height, data)
            .expect("sized buffer");
    img.save(path.as_ref())?;
    Ok(())
}

pub fn load_mask_png(path: impl AsRef<Path>) -> Result<MaskFrame, RenderError> {
    let img = image::open(path.as_ref())?.into_luma16();
    Ok(MaskFrame {
        width: img.width(),
        height: img.height(),
        bits: img.pixels().map(|p| p.0[0] > 0).collect(),
    })
}

const RAW_MAGIC: &[u8; 4] = b"OVDF";

/// Save the raw f32 depth grid: magic `OVDF`, u32 width, u32 height, then
/// row-major little-endian f32 millimeters.
pub fn save_depth_raw(frame: &DepthFrame, path: impl AsRef<Path>) -> Result<(), RenderError> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    w.write_all(RAW_MAGIC)?;
    w.write_all(&frame.width.to_le_bytes())?;
    w.write_all(&frame.height.to_le_bytes())?;
    for d in &frame.depth {
        w.write_all(&d.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Load a raw f32 depth grid; intrinsics are supplied by the caller (the
/// container stores only the grid).
pub fn load_depth_raw(
    path: impl AsRef<Path>,
    intrinsics: CameraIntrinsics,
) -> Result<DepthFrame, RenderError> {
    let path = path.as_ref();
    let mut data = Vec::new();
    File::open(path)?.read_to_end(&mut data)?;
    let fail = |message: String| RenderError::Format {
        path: path.display().to_string(),
        message,
    };
    if data.len() < 12 {
        return Err(fail("file too short for header".into()));
    }
    if &data[0..4] != RAW_MAGIC {
        return Err(fail("bad magic (expected OVDF)".into()));
    }
    let width = u32::from_le_bytes(data[4..8].try_into().unwrap());
    let height = u32::from_le_bytes(data[8..12].try_into().unwrap());
    let need = 12 + (width as usize) * (height as usize) * 4;
    if data.len() != need {
        return Err(fail(format!("expected {need} bytes, found {}", data.len())));
    }
    let depth: Vec<f32> = data[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if width != intrinsics.width || height != intrinsics.height {
        return Err(fail("intrinsics do not match stored size".into()));
    }
    DepthFrame::new(width, height, depth, intrinsics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{box_mesh, ellipsoid_mesh};
    use crate::geometry::{sample_viewpoints, Rotation};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use tempfile::tempdir;

    fn test_intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 64.0, 64.0, 128, 128).unwrap()
    }

    /// A thin axis-aligned square facing the camera (constant z across the
    /// front face).
    fn facing_square(side: f64) -> TriangleMesh {
        box_mesh(side, side, 0.01)
    }

    #[test]
    fn facing_square_reads_exact_depth() {
        let mesh = facing_square(100.0);
        let pose = Pose::new(Rotation::identity(), nalgebra::Vector3::new(0.0, 0.0, 1000.0))
            .unwrap();
        let frame = render_depth(&mesh, &pose, &test_intrinsics()).unwrap();
        let covered = frame.covered_pixels();
        assert!(covered > 500, "covered {covered}");
        for &d in frame.depth.iter().filter(|&&d| d > 0.0) {
            // Front face sits at z = 1000 − 0.005; the plate is 0.01 thick.
            assert!((f64::from(d) - 999.995).abs() < 0.01, "depth {d}");
        }
    }

    #[test]
    fn mask_equals_nonzero_depth() {
        let mesh = facing_square(80.0);
        let pose = Pose::new(Rotation::identity(), nalgebra::Vector3::new(5.0, -3.0, 900.0))
            .unwrap();
        let intr = test_intrinsics();
        let frame = render_depth(&mesh, &pose, &intr).unwrap();
        let mask = render_mask(&mesh, &pose, &intr).unwrap();
        assert_eq!(mask.count(), frame.covered_pixels());
        for (b, &d) in mask.bits.iter().zip(&frame.depth) {
            assert_eq!(*b, d > 0.0);
        }
    }

    #[test]
    fn sphere_center_pixel_depth() {
        let r = 40.0;
        let d = 800.0;
        let mesh = ellipsoid_mesh(r, r, r, 48, 96);
        let pose = Pose::new(Rotation::identity(), nalgebra::Vector3::new(0.0, 0.0, d)).unwrap();
        let frame = render_depth(&mesh, &pose, &test_intrinsics()).unwrap();
        // Principal point (64, 64) lies at the corner of pixel (63, 63);
        // check the four pixels around it.
        for (x, y) in [(63, 63), (64, 63), (63, 64), (64, 64)] {
            let z = f64::from(frame.at(x, y));
            assert!((z - (d - r)).abs() < 0.5, "center depth {z}");
        }
    }

    #[test]
    fn empty_frame_error_behind_camera() {
        let mesh = facing_square(50.0);
        let pose = Pose::new(Rotation::identity(), nalgebra::Vector3::new(0.0, 0.0, -500.0))
            .unwrap();
        assert!(matches!(
            render_depth(&mesh, &pose, &test_intrinsics()),
            Err(RenderError::EmptyFrame)
        ));
    }

    #[test]
    fn rendering_is_deterministic() {
        let mesh = ellipsoid_mesh(50.0, 30.0, 20.0, 24, 48);
        let pose = Pose::new(
            Rotation::rot_x(0.4).compose(&Rotation::rot_z(1.1)),
            nalgebra::Vector3::new(10.0, 5.0, 700.0),
        )
        .unwrap();
        let intr = test_intrinsics();
        let a = render_depth(&mesh, &pose, &intr).unwrap();
        let b = render_depth(&mesh, &pose, &intr).unwrap();
        assert_eq!(a.depth, b.depth);
    }

    #[test]
    fn depth_values_respect_clip_range() {
        let mesh = ellipsoid_mesh(40.0, 25.0, 18.0, 24, 48);
        let pose = Pose::new(Rotation::rot_y(0.8), nalgebra::Vector3::new(0.0, 0.0, 500.0))
            .unwrap();
        let frame = render_depth(&mesh, &pose, &test_intrinsics()).unwrap();
        for &d in &frame.depth {
            let d = f64::from(d);
            assert!(d == 0.0 || (d > NEAR_CLIP_MM && d < FAR_CLIP_MM));
        }
    }

    #[test]
    fn raster_matches_raycast_oracle() {
        let mesh = ellipsoid_mesh(45.0, 30.0, 22.0, 32, 64);
        let pose = Pose::new(
            Rotation::rot_x(0.7).compose(&Rotation::rot_z(0.3)),
            nalgebra::Vector3::new(8.0, -12.0, 650.0),
        )
        .unwrap();
        let intr = test_intrinsics();
        let frame = render_depth(&mesh, &pose, &intr).unwrap();
        let covered: Vec<(u32, u32)> = (0..intr.height)
            .flat_map(|y| (0..intr.width).map(move |x| (x, y)))
            .filter(|&(x, y)| frame.at(x, y) > 0.0)
            .collect();
        let mut rng = StdRng::seed_from_u64(4);
        let mut checked = 0;
        while checked < 50 {
            let (x, y) = covered[rng.gen_range(0..covered.len())];
            let Some(oracle) = raycast_depth_at_pixel(&mesh, &pose, &intr, x, y) else {
                continue; // grazing pixel where the rasterizer rounded outward
            };
            let z = f64::from(frame.at(x, y));
            assert!(
                (z - oracle).abs() < 0.5,
                "pixel ({x},{y}): raster {z} vs raycast {oracle}"
            );
            checked += 1;
        }
    }

    #[test]
    fn optical_axis_translation_shifts_planar_depth_exactly() {
        let mesh = facing_square(90.0);
        let intr = test_intrinsics();
        let p0 = Pose::new(Rotation::identity(), nalgebra::Vector3::new(0.0, 0.0, 1000.0))
            .unwrap();
        let p1 = Pose::new(Rotation::identity(), nalgebra::Vector3::new(0.0, 0.0, 1010.0))
            .unwrap();
        let a = render_depth(&mesh, &p0, &intr).unwrap();
        let b = render_depth(&mesh, &p1, &intr).unwrap();
        let mut compared = 0;
        for i in 0..a.depth.len() {
            if a.depth[i] > 0.0 && b.depth[i] > 0.0 {
                let delta = f64::from(b.depth[i]) - f64::from(a.depth[i]);
                assert!((delta - 10.0).abs() < 1e-3, "delta {delta}");
                compared += 1;
            }
        }
        assert!(compared > 400);
    }

    #[test]
    fn optical_axis_translation_on_curved_surface() {
        let mesh = ellipsoid_mesh(40.0, 40.0, 40.0, 48, 96);
        let intr = test_intrinsics();
        let p0 = Pose::new(Rotation::identity(), nalgebra::Vector3::new(0.0, 0.0, 900.0))
            .unwrap();
        let p1 = Pose::new(Rotation::identity(), nalgebra::Vector3::new(0.0, 0.0, 910.0))
            .unwrap();
        let a = render_depth(&mesh, &p0, &intr).unwrap();
        let b = render_depth(&mesh, &p1, &intr).unwrap();
        // Each pixel ray hits a marginally different surface point after the
        // shift, so the deviation from +10 mm grows with surface slope;
        // compare the front cap where the slope is bounded.
        let mut worst = 0.0f64;
        let mut compared = 0;
        for i in 0..a.depth.len() {
            if a.depth[i] > 0.0 && b.depth[i] > 0.0 && a.depth[i] < 875.0 {
                let delta = f64::from(b.depth[i]) - f64::from(a.depth[i]);
                worst = worst.max((delta - 10.0).abs());
                compared += 1;
            }
        }
        assert!(compared > 100);
        assert!(worst < 0.6, "worst deviation {worst}");
    }

    #[test]
    fn convex_mask_pixels_have_single_front_hit() {
        let mesh = ellipsoid_mesh(42.0, 30.0, 24.0, 24, 48);
        let pose = Pose::new(Rotation::rot_x(0.5), nalgebra::Vector3::new(0.0, 0.0, 700.0))
            .unwrap();
        let intr = test_intrinsics();
        let frame = render_depth(&mesh, &pose, &intr).unwrap();
        let mut rng = StdRng::seed_from_u64(2);
        let covered: Vec<(u32, u32)> = (0..intr.height)
            .flat_map(|y| (0..intr.width).map(move |x| (x, y)))
            .filter(|&(x, y)| frame.at(x, y) > 0.0)
            .collect();
        for _ in 0..100 {
            let (x, y) = covered[rng.gen_range(0..covered.len())];
            let hits = raycast_front_hits(&mesh, &pose, &intr, x, y);
            // Silhouette pixels may graze; interior pixels must see exactly
            // one front face.
            if raycast_depth_at_pixel(&mesh, &pose, &intr, x, y).is_some() {
                assert_eq!(hits, 1, "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn codebook_view_distance_and_centering() {
        let mesh = ellipsoid_mesh(50.0, 35.0, 25.0, 24, 48);
        let sphere = ellipsoid_mesh(40.0, 40.0, 40.0, 24, 48);
        let d = mesh.diameter();
        let vp = sample_viewpoints(10).unwrap();
        for r in &vp {
            let pose = codebook_view_pose(&mesh, r, 5.0);
            // Object center maps to (0, 0, 5·diameter).
            let c = pose.transform_point(&mesh.aabb_center());
            assert!((c.z - 5.0 * d).abs() < 1e-9);
            assert!(c.x.abs() < 1e-9 && c.y.abs() < 1e-9);

            let mask_center = |m: &TriangleMesh| {
                let frame = render_codebook_view(m, r, 5.0).unwrap();
                let (x0, y0, x1, y1) = frame.mask().bounding_box().unwrap();
                (
                    f64::from(x0 + x1) / 2.0 + 0.5,
                    f64::from(y0 + y1) / 2.0 + 0.5,
                )
            };
            // A sphere silhouette is exactly symmetric about the principal
            // point; tilted shapes pick up a small perspective skew of the
            // silhouette bounding box.
            let (cx, cy) = mask_center(&sphere);
            assert!(
                (cx - 64.0).abs() <= 1.0 && (cy - 64.0).abs() <= 1.0,
                "sphere mask center ({cx}, {cy})"
            );
            let (cx, cy) = mask_center(&mesh);
            assert!(
                (cx - 64.0).abs() <= 2.0 && (cy - 64.0).abs() <= 2.0,
                "ellipsoid mask center ({cx}, {cy})"
            );
        }
    }

    #[test]
    fn inplane_rotation_preserves_depth_histogram() {
        let mesh = ellipsoid_mesh(55.0, 30.0, 20.0, 24, 48);
        let base = sample_viewpoints(7).unwrap()[3];
        let rotated = Rotation::rot_z(1.2).compose(&base);
        let a = render_codebook_view(&mesh, &base, 5.0).unwrap();
        let b = render_codebook_view(&mesh, &rotated, 5.0).unwrap();
        let ha = depth_histogram(&a, 16);
        let hb = depth_histogram(&b, 16);
        let l1: f64 = ha.iter().zip(&hb).map(|(x, y)| (x - y).abs()).sum();
        assert!(l1 < 0.08, "histogram L1 distance {l1}");
    }

    #[test]
    fn png_roundtrip_quantizes_to_millimeters() {
        let mesh = facing_square(60.0);
        let pose = Pose::new(Rotation::identity(), nalgebra::Vector3::new(0.0, 0.0, 850.25))
            .unwrap();
        let frame = render_depth(&mesh, &pose, &test_intrinsics()).unwrap();
        let dir = tempdir().unwrap();
        let p = dir.path().join("depth.png");
        save_depth_png(&frame, &p).unwrap();
        let back = load_depth_png(&p).unwrap();
        assert_eq!(back.intrinsics, frame.intrinsics);
        for (a, b) in back.depth.iter().zip(&frame.depth) {
            assert!((a - b.round()).abs() < 0.5 + 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn raw_roundtrip_is_bit_exact() {
        let mesh = ellipsoid_mesh(30.0, 30.0, 30.0, 16, 24);
        let pose = Pose::new(Rotation::identity(), nalgebra::Vector3::new(0.0, 0.0, 700.0))
            .unwrap();
        let intr = test_intrinsics();
        let frame = render_depth(&mesh, &pose, &intr).unwrap();
        let dir = tempdir().unwrap();
        let p = dir.path().join("depth.ovdf");
        save_depth_raw(&frame, &p).unwrap();
        let back = load_depth_raw(&p, intr).unwrap();
        assert_eq!(back.depth, frame.depth);

        // Corrupt the magic.
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, bytes).unwrap();
        assert!(load_depth_raw(&p, frame.intrinsics.clone()).is_err());
    }

    #[test]
    fn mask_png_roundtrip() {
        let mesh = ellipsoid_mesh(35.0, 22.0, 18.0, 16, 24);
        let pose = Pose::new(Rotation::rot_y(0.3), nalgebra::Vector3::new(0.0, 0.0, 600.0))
            .unwrap();
        let mask = render_mask(&mesh, &pose, &test_intrinsics()).unwrap();
        let dir = tempdir().unwrap();
        let p = dir.path().join("mask.png");
        save_mask_png(&mask, &p).unwrap();
        assert_eq!(load_mask_png(&p).unwrap(), mask);
    }
}
