//! Triangle meshes in millimeters.

use nalgebra::Vector3;

use super::{GeometryError, Pose};

/// Vertex count above which the diameter computation filters through the
/// convex hull before the exact pairwise scan.
const EXACT_DIAMETER_LIMIT: usize = 20_000;

/// An indexed triangle mesh in millimeters, immutable after construction.
#[derive(Debug, Clone)]
pub struct TriangleMesh {
    vertices: Vec<Vector3<f64>>,
    faces: Vec<[u32; 3]>,
    object_id: String,
    diameter: f64,
}

impl TriangleMesh {
    /// Validating constructor. Requires at least 4 vertices, in-range face
    /// indices and a strictly positive diameter.
    pub fn new(
        vertices: Vec<Vector3<f64>>,
        faces: Vec<[u32; 3]>,
        object_id: impl Into<String>,
    ) -> Result<Self, GeometryError> {
        if vertices.len() < 4 {
            return Err(GeometryError::InvalidArgument(format!(
                "mesh needs at least 4 vertices, got {}",
                vertices.len()
            )));
        }
        let n = vertices.len() as u32;
        for (fi, f) in faces.iter().enumerate() {
            if f.iter().any(|&i| i >= n) {
                return Err(GeometryError::InvalidArgument(format!(
                    "face {fi} references vertex out of range (n = {n})"
                )));
            }
        }
        if vertices
            .iter()
            .any(|v| !(v.x.is_finite() && v.y.is_finite() && v.z.is_finite()))
        {
            return Err(GeometryError::InvalidArgument(
                "mesh vertices must be finite".into(),
            ));
        }
        let diameter = diameter_of_points(&vertices);
        if !(diameter > 0.0) {
            return Err(GeometryError::InvalidArgument(
                "mesh diameter must be positive".into(),
            ));
        }
        Ok(Self {
            vertices,
            faces,
            object_id: object_id.into(),
            diameter,
        })
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn object_id(&self) -> &str {
        &self.object_id
    }

    /// Maximum pairwise vertex distance (mm), computed at construction.
    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    /// Center of the axis-aligned bounding box, in object coordinates.
    pub fn aabb_center(&self) -> Vector3<f64> {
        let (lo, hi) = self.aabb();
        (lo + hi) / 2.0
    }

    pub fn aabb(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (lo, hi)
    }

    /// A copy with a rigid transform applied to every vertex.
    pub fn transformed(&self, pose: &Pose) -> TriangleMesh {
        let vertices = self
            .vertices
            .iter()
            .map(|v| pose.transform_point(v))
            .collect();
        TriangleMesh {
            vertices,
            faces: self.faces.clone(),
            object_id: self.object_id.clone(),
            diameter: self.diameter,
        }
    }
}

/// Maximum pairwise distance of a point set. Exact `O(V²)` scan up to
/// [`EXACT_DIAMETER_LIMIT`] points, convex-hull-filtered above that.
pub fn diameter_of_points(points: &[Vector3<f64>]) -> f64 {
    if points.len() <= EXACT_DIAMETER_LIMIT {
        return pairwise_diameter(points);
    }
    let hull = convex_hull_vertex_indices(points);
    if hull.is_empty() {
        return pairwise_diameter(points);
    }
    let hull_pts: Vec<Vector3<f64>> = hull.iter().map(|&i| points[i]).collect();
    pairwise_diameter(&hull_pts)
}

fn pairwise_diameter(points: &[Vector3<f64>]) -> f64 {
    let mut best = 0.0f64;
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            let d2 = (points[i] - points[j]).norm_squared();
            if d2 > best {
                best = d2;
            }
        }
    }
    best.sqrt()
}

#[derive(Clone)]
struct HullFace {
    v: [usize; 3],
    normal: Vector3<f64>,
    offset: f64,
    outside: Vec<usize>,
}

impl HullFace {
    fn new(a: usize, b: usize, c: usize, pts: &[Vector3<f64>]) -> Self {
        let n = (pts[b] - pts[a]).cross(&(pts[c] - pts[a]));
        let normal = if n.norm() > 0.0 { n.normalize() } else { n };
        let offset = normal.dot(&pts[a]);
        Self {
            v: [a, b, c],
            normal,
            offset,
            outside: Vec::new(),
        }
    }

    fn dist(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(p) - self.offset
    }
}

/// Indices of the vertices on the convex hull (quickhull). Returns an empty
/// vector when the input is degenerate (coplanar or lower-dimensional); the
/// caller falls back to the exhaustive scan in that case.
fn convex_hull_vertex_indices(pts: &[Vector3<f64>]) -> Vec<usize> {
    let n = pts.len();
    if n < 4 {
        return Vec::new();
    }
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in pts {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let eps = (hi - lo).norm().max(1e-9) * 1e-10;

    // Initial simplex: extreme pair, then farthest from the line, then from
    // the plane.
    let (mut i0, mut i1) = (0, 0);
    let mut best = -1.0;
    for axis in 0..3 {
        let (mut amin, mut amax) = (0usize, 0usize);
        for (i, p) in pts.iter().enumerate() {
            if p[axis] < pts[amin][axis] {
                amin = i;
            }
            if p[axis] > pts[amax][axis] {
                amax = i;
            }
        }
        let d = (pts[amax] - pts[amin]).norm();
        if d > best {
            best = d;
            i0 = amin;
            i1 = amax;
        }
    }
    if best <= eps {
        return Vec::new();
    }
    let dir = (pts[i1] - pts[i0]).normalize();
    let mut i2 = usize::MAX;
    let mut best = eps;
    for (i, p) in pts.iter().enumerate() {
        let off = p - pts[i0];
        let d = (off - dir * off.dot(&dir)).norm();
        if d > best {
            best = d;
            i2 = i;
        }
    }
    if i2 == usize::MAX {
        return Vec::new();
    }
    let plane_n = (pts[i1] - pts[i0]).cross(&(pts[i2] - pts[i0])).normalize();
    let mut i3 = usize::MAX;
    let mut best = eps;
    for (i, p) in pts.iter().enumerate() {
        let d = plane_n.dot(&(p - pts[i0])).abs();
        if d > best {
            best = d;
            i3 = i;
        }
    }
    if i3 == usize::MAX {
        return Vec::new();
    }

    let centroid = (pts[i0] + pts[i1] + pts[i2] + pts[i3]) / 4.0;
    let orient = |a: usize, b: usize, c: usize| -> HullFace {
        let f = HullFace::new(a, b, c, pts);
        if f.dist(&centroid) > 0.0 {
            HullFace::new(a, c, b, pts)
        } else {
            f
        }
    };
    let mut faces = vec![
        orient(i0, i1, i2),
        orient(i0, i1, i3),
        orient(i0, i2, i3),
        orient(i1, i2, i3),
    ];

    // Assign every point to the first face that sees it.
    for i in 0..n {
        for f in faces.iter_mut() {
            if f.dist(&pts[i]) > eps {
                f.outside.push(i);
                break;
            }
        }
    }

    loop {
        let Some(fi) = faces.iter().position(|f| !f.outside.is_empty()) else {
            break;
        };
        // Farthest outside point of that face.
        let far = *faces[fi]
            .outside
            .iter()
            .max_by(|&&a, &&b| {
                faces[fi]
                    .dist(&pts[a])
                    .partial_cmp(&faces[fi].dist(&pts[b]))
                    .unwrap()
            })
            .unwrap();
        let fp = pts[far];

        // All faces visible from the point; their boundary is the horizon.
        let visible: Vec<usize> = (0..faces.len())
            .filter(|&i| faces[i].dist(&fp) > eps)
            .collect();
        let mut edge_count = std::collections::HashMap::new();
        for &i in &visible {
            let v = faces[i].v;
            for e in [[v[0], v[1]], [v[1], v[2]], [v[2], v[0]]] {
                let key = (e[0].min(e[1]), e[0].max(e[1]));
                let entry = edge_count.entry(key).or_insert((0usize, e));
                entry.0 += 1;
                entry.1 = e;
            }
        }
        let mut orphan: Vec<usize> = Vec::new();
        for &i in &visible {
            orphan.extend(faces[i].outside.iter().copied());
        }
        let visible_set: std::collections::HashSet<usize> = visible.iter().copied().collect();
        let mut kept: Vec<HullFace> = Vec::with_capacity(faces.len());
        for (i, f) in faces.into_iter().enumerate() {
            if !visible_set.contains(&i) {
                kept.push(f);
            }
        }
        for (_, (count, e)) in edge_count {
            if count == 1 {
                let mut nf = HullFace::new(e[0], e[1], far, pts);
                if nf.dist(&centroid) > 0.0 {
                    nf = HullFace::new(e[1], e[0], far, pts);
                }
                kept.push(nf);
            }
        }
        // Redistribute orphaned points.
        for i in orphan {
            if i == far {
                continue;
            }
            for f in kept.iter_mut() {
                if f.dist(&pts[i]) > eps {
                    f.outside.push(i);
                    break;
                }
            }
        }
        faces = kept;
    }

    let mut seen = std::collections::HashSet::new();
    for f in &faces {
        seen.extend(f.v);
    }
    let mut out: Vec<usize> = seen.into_iter().collect();
    out.sort_unstable();
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::geometry::Rotation;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    pub(crate) fn unit_cube(side: f64) -> TriangleMesh {
        let h = side / 2.0;
        let v = vec![
            Vector3::new(-h, -h, -h),
            Vector3::new(h, -h, -h),
            Vector3::new(h, h, -h),
            Vector3::new(-h, h, -h),
            Vector3::new(-h, -h, h),
            Vector3::new(h, -h, h),
            Vector3::new(h, h, h),
            Vector3::new(-h, h, h),
        ];
        let f = vec![
            [0, 2, 1],
            [0, 3, 2],
            [4, 5, 6],
            [4, 6, 7],
            [0, 1, 5],
            [0, 5, 4],
            [2, 3, 7],
            [2, 7, 6],
            [1, 2, 6],
            [1, 6, 5],
            [3, 0, 4],
            [3, 4, 7],
        ];
        TriangleMesh::new(v, f, "cube").unwrap()
    }

    fn uv_sphere(radius: f64, stacks: usize, slices: usize) -> TriangleMesh {
        let mut v = Vec::new();
        for i in 0..=stacks {
            let phi = std::f64::consts::PI * i as f64 / stacks as f64;
            for j in 0..slices {
                let theta = std::f64::consts::TAU * j as f64 / slices as f64;
                v.push(Vector3::new(
                    radius * phi.sin() * theta.cos(),
                    radius * phi.sin() * theta.sin(),
                    radius * phi.cos(),
                ));
            }
        }
        let idx = |i: usize, j: usize| (i * slices + (j % slices)) as u32;
        let mut f = Vec::new();
        for i in 0..stacks {
            for j in 0..slices {
                f.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
                f.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
            }
        }
        TriangleMesh::new(v, f, "sphere").unwrap()
    }

    #[test]
    fn validation_rejects_bad_meshes() {
        let v = vec![
            Vector3::zeros(),
            Vector3::x(),
            Vector3::y(),
            Vector3::z(),
        ];
        assert!(TriangleMesh::new(v.clone(), vec![[0, 1, 9]], "bad").is_err());
        assert!(TriangleMesh::new(v[..3].to_vec(), vec![[0, 1, 2]], "small").is_err());
        let same = vec![Vector3::zeros(); 5];
        assert!(TriangleMesh::new(same, vec![[0, 1, 2]], "flat").is_err());
    }

    #[test]
    fn cube_diameter_is_space_diagonal() {
        let m = unit_cube(100.0);
        assert!((m.diameter() - 100.0 * 3f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn tetrahedron_diameter_matches_bruteforce() {
        let v = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(40.0, 0.0, 0.0),
            Vector3::new(0.0, 70.0, 0.0),
            Vector3::new(10.0, 10.0, 55.0),
        ];
        let mut expect = 0.0f64;
        for i in 0..4 {
            for j in 0..4 {
                expect = expect.max((v[i] - v[j]).norm());
            }
        }
        let m = TriangleMesh::new(v, vec![[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]], "tet")
            .unwrap();
        assert!((m.diameter() - expect).abs() < 1e-12);
    }

    #[test]
    fn sphere_diameter_close_to_analytic() {
        let m = uv_sphere(50.0, 24, 32);
        assert!((m.diameter() - 100.0).abs() < 1.0, "got {}", m.diameter());
    }

    #[test]
    fn diameter_invariant_under_rigid_transform() {
        let mut rng = StdRng::seed_from_u64(3);
        let m = uv_sphere(40.0, 12, 16);
        for _ in 0..10 {
            let r = Rotation::rot_z(rng.gen_range(0.0..6.0))
                .compose(&Rotation::rot_x(rng.gen_range(0.0..6.0)));
            let pose = Pose::new(r, Vector3::new(100.0, -30.0, 50.0)).unwrap();
            let t = m.transformed(&pose);
            let d = diameter_of_points(t.vertices());
            assert!((d - m.diameter()).abs() / m.diameter() < 1e-6);
        }
    }

    #[test]
    fn hull_filtered_diameter_matches_exact() {
        // Above the exact-scan limit, the hull path must agree with the
        // brute-force result.
        let mut rng = StdRng::seed_from_u64(8);
        let pts: Vec<Vector3<f64>> = (0..21_000)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-80.0..80.0f64),
                    rng.gen_range(-50.0..50.0),
                    rng.gen_range(-30.0..30.0),
                )
            })
            .collect();
        let exact = pairwise_diameter(&pts);
        let filtered = diameter_of_points(&pts);
        assert!(
            (exact - filtered).abs() < 1e-9,
            "exact {exact} filtered {filtered}"
        );
    }

    #[test]
    fn hull_of_cube_with_interior_points_keeps_corners() {
        let mut pts: Vec<Vector3<f64>> = unit_cube(10.0).vertices().to_vec();
        let mut rng = StdRng::seed_from_u64(1);
        for _ in 0..500 {
            pts.push(Vector3::new(
                rng.gen_range(-4.9..4.9f64),
                rng.gen_range(-4.9..4.9),
                rng.gen_range(-4.9..4.9),
            ));
        }
        let hull = convex_hull_vertex_indices(&pts);
        assert_eq!(hull, vec![0, 1, 2, 3, 4, 5, 6, 7]);
    }
}
