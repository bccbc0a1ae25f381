//! Procedural watertight primitives and the mixed-family shape generator.

use nalgebra::Vector3;
use rand::Rng;

use super::DatagenError;
use crate::geometry::{Pose, Rotation, TriangleMesh};
use crate::seed;

/// Generated mesh diameters stay inside this range (mm).
pub const DIAMETER_RANGE_MM: (f64, f64) = (50.0, 300.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeFamily {
    Box,
    Cylinder,
    Ellipsoid,
    Superellipsoid,
    UnionOfTwo,
}

impl ShapeFamily {
    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Box => "box",
            ShapeFamily::Cylinder => "cylinder",
            ShapeFamily::Ellipsoid => "ellipsoid",
            ShapeFamily::Superellipsoid => "superellipsoid",
            ShapeFamily::UnionOfTwo => "union2",
        }
    }
}

/// Parameters of one generated shape.
#[derive(Debug, Clone)]
pub struct ShapeSpec {
    pub family: ShapeFamily,
    pub diameter_mm: f64,
    pub seed: u64,
}

/// An axis-aligned box with the given full side lengths, centered at the
/// origin.
pub fn box_mesh(a: f64, b: f64, c: f64) -> TriangleMesh {
    let (hx, hy, hz) = (a / 2.0, b / 2.0, c / 2.0);
    let v = vec![
        Vector3::new(-hx, -hy, -hz),
        Vector3::new(hx, -hy, -hz),
        Vector3::new(hx, hy, -hz),
        Vector3::new(-hx, hy, -hz),
        Vector3::new(-hx, -hy, hz),
        Vector3::new(hx, -hy, hz),
        Vector3::new(hx, hy, hz),
        Vector3::new(-hx, hy, hz),
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
    TriangleMesh::new(v, f, "box").expect("box mesh")
}

/// A closed cylinder along z, centered at the origin.
pub fn cylinder_mesh(radius: f64, height: f64, segments: usize) -> TriangleMesh {
    let h = height / 2.0;
    let mut v = Vec::with_capacity(2 * segments + 2);
    for ring in [-h, h] {
        for j in 0..segments {
            let a = std::f64::consts::TAU * j as f64 / segments as f64;
            v.push(Vector3::new(radius * a.cos(), radius * a.sin(), ring));
        }
    }
    let bottom_center = v.len() as u32;
    v.push(Vector3::new(0.0, 0.0, -h));
    let top_center = v.len() as u32;
    v.push(Vector3::new(0.0, 0.0, h));

    let seg = segments as u32;
    let mut f = Vec::new();
    for j in 0..seg {
        let jn = (j + 1) % seg;
        // side quad
        f.push([j, jn, seg + j]);
        f.push([jn, seg + jn, seg + j]);
        // caps
        f.push([bottom_center, jn, j]);
        f.push([top_center, seg + j, seg + jn]);
    }
    TriangleMesh::new(v, f, "cylinder").expect("cylinder mesh")
}

fn signed_pow(x: f64, e: f64) -> f64 {
    x.signum() * x.abs().powf(e)
}

/// A superellipsoid with semi-axes (a, b, c) and exponents (e1, e2).
/// Exponent 1 on both gives an ellipsoid.
pub fn superellipsoid_mesh(
    a: f64,
    b: f64,
    c: f64,
    e1: f64,
    e2: f64,
    stacks: usize,
    slices: usize,
) -> TriangleMesh {
    let mut v = Vec::new();
    v.push(Vector3::new(0.0, 0.0, c)); // north pole (u = +π/2)
    for i in 1..stacks {
        let u = std::f64::consts::FRAC_PI_2 - std::f64::consts::PI * i as f64 / stacks as f64;
        let (su, cu) = (signed_pow(u.sin(), e1), signed_pow(u.cos(), e1));
        for j in 0..slices {
            let w = std::f64::consts::TAU * j as f64 / slices as f64 - std::f64::consts::PI;
            let (sw, cw) = (signed_pow(w.sin(), e2), signed_pow(w.cos(), e2));
            v.push(Vector3::new(a * cu * cw, b * cu * sw, c * su));
        }
    }
    v.push(Vector3::new(0.0, 0.0, -c)); // south pole

    let north = 0u32;
    let south = (v.len() - 1) as u32;
    let ring = |i: usize, j: usize| (1 + (i - 1) * slices + (j % slices)) as u32;
    let mut f = Vec::new();
    for j in 0..slices {
        f.push([north, ring(1, j), ring(1, j + 1)]);
        f.push([south, ring(stacks - 1, j + 1), ring(stacks - 1, j)]);
    }
    for i in 1..stacks - 1 {
        for j in 0..slices {
            f.push([ring(i, j), ring(i + 1, j), ring(i + 1, j + 1)]);
            f.push([ring(i, j), ring(i + 1, j + 1), ring(i, j + 1)]);
        }
    }
    TriangleMesh::new(v, f, "superellipsoid").expect("superellipsoid mesh")
}

/// An ellipsoid with semi-axes (a, b, c).
pub fn ellipsoid_mesh(a: f64, b: f64, c: f64, stacks: usize, slices: usize) -> TriangleMesh {
    superellipsoid_mesh(a, b, c, 1.0, 1.0, stacks, slices)
}

fn concat_meshes(a: &TriangleMesh, b: &TriangleMesh, id: &str) -> TriangleMesh {
    let mut v: Vec<Vector3<f64>> = a.vertices().to_vec();
    let off = v.len() as u32;
    v.extend_from_slice(b.vertices());
    let mut f: Vec<[u32; 3]> = a.faces().to_vec();
    f.extend(b.faces().iter().map(|t| [t[0] + off, t[1] + off, t[2] + off]));
    TriangleMesh::new(v, f, id).expect("union mesh")
}

fn recenter_and_scale(mesh: &TriangleMesh, target_diameter: f64, id: &str) -> TriangleMesh {
    let c = mesh.aabb_center();
    let s = target_diameter / mesh.diameter();
    let v = mesh.vertices().iter().map(|p| (p - c) * s).collect();
    TriangleMesh::new(v, mesh.faces().to_vec(), id).expect("rescaled mesh")
}

fn base_primitive(family: ShapeFamily, rng: &mut impl Rng) -> TriangleMesh {
    match family {
        ShapeFamily::Box => {
            // Distinct side ratios keep the silhouette informative.
            box_mesh(
                100.0,
                100.0 * rng.gen_range(0.45..0.8),
                100.0 * rng.gen_range(0.2..0.42),
            )
        }
        ShapeFamily::Cylinder => cylinder_mesh(
            50.0 * rng.gen_range(0.35..0.7),
            100.0 * rng.gen_range(0.7..1.3),
            48,
        ),
        ShapeFamily::Ellipsoid => ellipsoid_mesh(
            50.0,
            50.0 * rng.gen_range(0.5..0.75),
            50.0 * rng.gen_range(0.28..0.48),
            24,
            48,
        ),
        ShapeFamily::Superellipsoid => superellipsoid_mesh(
            50.0,
            50.0 * rng.gen_range(0.5..0.8),
            50.0 * rng.gen_range(0.3..0.55),
            rng.gen_range(0.4..1.6),
            rng.gen_range(0.4..1.6),
            24,
            48,
        ),
        ShapeFamily::UnionOfTwo => {
            let first = base_primitive(pick_core_family(rng), rng);
            let mut second = base_primitive(pick_core_family(rng), rng);
            // Shrink and offset the second part so the pair overlaps but
            // breaks the first part's symmetries.
            let scale = rng.gen_range(0.45..0.7);
            let dir = random_unit(rng);
            let offset = dir * first.diameter() * rng.gen_range(0.25..0.45);
            let rot = random_rotation(rng);
            let verts = second
                .vertices()
                .iter()
                .map(|p| rot.rotate(&(p * scale)) + offset)
                .collect();
            second = TriangleMesh::new(verts, second.faces().to_vec(), "part").expect("part");
            concat_meshes(&first, &second, "union2")
        }
    }
}

fn pick_core_family(rng: &mut impl Rng) -> ShapeFamily {
    match rng.gen_range(0..4) {
        0 => ShapeFamily::Box,
        1 => ShapeFamily::Cylinder,
        2 => ShapeFamily::Ellipsoid,
        _ => ShapeFamily::Superellipsoid,
    }
}

fn pick_family(rng: &mut impl Rng) -> ShapeFamily {
    // Weighted toward asymmetric families; quadrics carry 180° symmetries
    // that make viewpoint triplets ambiguous.
    let x: f64 = rng.gen();
    if x < 0.35 {
        ShapeFamily::UnionOfTwo
    } else if x < 0.60 {
        ShapeFamily::Superellipsoid
    } else if x < 0.75 {
        ShapeFamily::Box
    } else if x < 0.90 {
        ShapeFamily::Ellipsoid
    } else {
        ShapeFamily::Cylinder
    }
}

pub(crate) fn random_unit(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.gen_range(-1.0..1.0f64),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n < 1.0 {
            return v / n;
        }
    }
}

pub(crate) fn random_rotation(rng: &mut impl Rng) -> Rotation {
    let q = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
        rng.gen_range(-1.0..1.0f64),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    ));
    Rotation::from_matrix(*q.to_rotation_matrix().matrix()).expect("unit quaternion rotation")
}

/// Generate `count` mixed-family meshes, deterministic per seed. Diameters
/// land in [`DIAMETER_RANGE_MM`]; every mesh is watertight by construction
/// and centered on its bounding box.
pub fn generate_shapes(count: usize, root_seed: u64) -> Result<Vec<TriangleMesh>, DatagenError> {
    if count < 1 {
        return Err(DatagenError::InvalidArgument(
            "shape count must be at least 1".into(),
        ));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = seed::rng(root_seed, "datagen/shape", i as u64);
        let family = pick_family(&mut rng);
        let target_d = rng.gen_range(60.0..280.0);
        let raw = base_primitive(family, &mut rng);
        // Random attitude so generated shapes are not axis-aligned.
        let rot = random_rotation(&mut rng);
        let pose = Pose::new(rot, Vector3::zeros()).expect("pose");
        let rotated = raw.transformed(&pose);
        let id = format!("gen{root_seed}-{i:03}-{}", family.name());
        out.push(recenter_and_scale(&rotated, target_d, &id));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn generator_is_deterministic() {
        let a = generate_shapes(5, 42).unwrap();
        let b = generate_shapes(5, 42).unwrap();
        for (ma, mb) in a.iter().zip(&b) {
            assert_eq!(ma.object_id(), mb.object_id());
            assert_eq!(ma.vertices(), mb.vertices());
            assert_eq!(ma.faces(), mb.faces());
        }
        let c = generate_shapes(5, 43).unwrap();
        assert_ne!(a[0].vertices(), c[0].vertices());
    }

    #[test]
    fn twenty_shapes_cover_at_least_three_families() {
        let shapes = generate_shapes(20, 7).unwrap();
        let families: HashSet<&str> = shapes
            .iter()
            .map(|m| m.object_id().rsplit('-').next().unwrap())
            .collect();
        assert!(families.len() >= 3, "families: {families:?}");
    }

    #[test]
    fn diameters_stay_in_range() {
        for m in generate_shapes(30, 11).unwrap() {
            let d = m.diameter();
            assert!(
                (DIAMETER_RANGE_MM.0..=DIAMETER_RANGE_MM.1).contains(&d),
                "{}: diameter {d}",
                m.object_id()
            );
        }
    }

    #[test]
    fn primitives_are_closed_surfaces() {
        // Every edge of a watertight mesh is shared by exactly two triangles.
        for mesh in [
            box_mesh(40.0, 30.0, 20.0),
            cylinder_mesh(20.0, 50.0, 16),
            ellipsoid_mesh(30.0, 20.0, 15.0, 8, 12),
            superellipsoid_mesh(30.0, 20.0, 15.0, 0.7, 1.3, 8, 12),
        ] {
            let mut edges = std::collections::HashMap::new();
            for f in mesh.faces() {
                for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                    *edges.entry((a.min(b), a.max(b))).or_insert(0) += 1;
                }
            }
            for (e, n) in edges {
                assert_eq!(n, 2, "{}: edge {e:?} shared by {n}", mesh.object_id());
            }
        }
    }

    #[test]
    fn centered_on_bounding_box() {
        for m in generate_shapes(6, 3).unwrap() {
            assert!(m.aabb_center().norm() < 1e-9);
        }
    }
}
