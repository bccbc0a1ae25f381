//! Mesh file I/O: OBJ (v/f lines) and binary little-endian PLY.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use super::{GeometryError, TriangleMesh};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    PlyBinary,
}

impl MeshFormat {
    fn from_path(path: &Path) -> MeshFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("ply") => MeshFormat::PlyBinary,
            _ => MeshFormat::Obj,
        }
    }
}

/// Load a mesh from an OBJ or binary PLY file; the format is sniffed from the
/// leading bytes. The object id is the file stem.
pub fn load_mesh(path: impl AsRef<Path>) -> Result<TriangleMesh, GeometryError> {
    let path = path.as_ref();
    let mut file = File::open(path)?;
    let mut magic = [0u8; 3];
    let n = file.read(&mut magic)?;
    let object_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("mesh")
        .to_string();
    drop(file);
    if n >= 3 && &magic == b"ply" {
        load_ply(path, object_id)
    } else {
        load_obj(path, object_id)
    }
}

/// Save a mesh; format chosen by file extension (`.ply` for binary PLY,
/// anything else writes OBJ).
pub fn save_mesh(mesh: &TriangleMesh, path: impl AsRef<Path>) -> Result<(), GeometryError> {
    let path = path.as_ref();
    match MeshFormat::from_path(path) {
        MeshFormat::Obj => save_obj(mesh, path),
        MeshFormat::PlyBinary => save_ply(mesh, path),
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> GeometryError {
    GeometryError::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn load_obj(path: &Path, object_id: String) -> Result<TriangleMesh, GeometryError> {
    let reader = BufReader::new(File::open(path)?);
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let mut coords = [0.0f64; 3];
                for c in coords.iter_mut() {
                    let tok = it
                        .next()
                        .ok_or_else(|| parse_err(path, lineno, "vertex needs 3 coordinates"))?;
                    *c = tok
                        .parse()
                        .map_err(|_| parse_err(path, lineno, format!("bad coordinate '{tok}'")))?;
                }
                vertices.push(Vector3::new(coords[0], coords[1], coords[2]));
            }
            Some("f") => {
                let mut idx = Vec::new();
                for tok in it {
                    // Tolerate "i", "i/t" and "i/t/n" references.
                    let first = tok.split('/').next().unwrap_or("");
                    let i: i64 = first
                        .parse()
                        .map_err(|_| parse_err(path, lineno, format!("bad face index '{tok}'")))?;
                    if i < 1 {
                        return Err(parse_err(path, lineno, "face indices must be >= 1"));
                    }
                    idx.push((i - 1) as u32);
                }
                if idx.len() < 3 {
                    return Err(parse_err(path, lineno, "face needs at least 3 vertices"));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            // Other statements (normals, groups, comments) are ignored.
            _ => {}
        }
    }
    if vertices.is_empty() {
        return Err(parse_err(path, 0, "no vertices found"));
    }
    TriangleMesh::new(vertices, faces, object_id)
}

fn save_obj(mesh: &TriangleMesh, path: &Path) -> Result<(), GeometryError> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in mesh.vertices() {
        // Display prints the shortest string that round-trips the f64.
        writeln!(w, "v {} {} {}", v.x, v.y, v.z)?;
    }
    for f in mesh.faces() {
        writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    w.flush()?;
    Ok(())
}

fn load_ply(path: &Path, object_id: String) -> Result<TriangleMesh, GeometryError> {
    let mut data = Vec::new();
    File::open(path)?.read_to_end(&mut data)?;

    // Header is ASCII lines terminated by "end_header".
    let header_end = find_subsequence(&data, b"end_header\n")
        .ok_or_else(|| parse_err(path, 0, "missing end_header"))?
        + b"end_header\n".len();
    let header = std::str::from_utf8(&data[..header_end])
        .map_err(|_| parse_err(path, 0, "header is not valid ASCII"))?;

    let mut n_vertices = None;
    let mut n_faces = None;
    let mut vertex_props: Vec<String> = Vec::new();
    let mut current = "";
    let mut format_ok = false;
    for (lineno, line) in header.lines().enumerate() {
        let lineno = lineno + 1;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["ply"] | ["end_header"] | [] => {}
            ["comment", ..] => {}
            ["format", "binary_little_endian", "1.0"] => format_ok = true,
            ["format", other, ..] => {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("unsupported PLY format '{other}'"),
                ));
            }
            ["element", "vertex", n] => {
                n_vertices = Some(
                    n.parse::<usize>()
                        .map_err(|_| parse_err(path, lineno, "bad vertex count"))?,
                );
                current = "vertex";
            }
            ["element", "face", n] => {
                n_faces = Some(
                    n.parse::<usize>()
                        .map_err(|_| parse_err(path, lineno, "bad face count"))?,
                );
                current = "face";
            }
            ["element", other, _] => {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("unsupported element '{other}'"),
                ));
            }
            ["property", "float", name] if current == "vertex" => {
                vertex_props.push((*name).to_string());
            }
            ["property", "list", "uchar", int_ty, _name] if current == "face" => {
                if *int_ty != "int" && *int_ty != "uint" && *int_ty != "int32" {
                    return Err(parse_err(path, lineno, "unsupported face index type"));
                }
            }
            other => {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("unsupported header line '{}'", other.join(" ")),
                ));
            }
        }
    }
    if !format_ok {
        return Err(parse_err(path, 0, "not a binary little-endian PLY"));
    }
    if vertex_props != ["x", "y", "z"] {
        return Err(parse_err(
            path,
            0,
            "vertex element must have exactly float x, y, z",
        ));
    }
    let n_vertices = n_vertices.ok_or_else(|| parse_err(path, 0, "missing vertex element"))?;
    let n_faces = n_faces.unwrap_or(0);

    let mut off = header_end;
    let take = |off: &mut usize, len: usize| -> Result<&[u8], GeometryError> {
        if *off + len > data.len() {
            return Err(parse_err(
                path,
                0,
                format!("truncated payload at byte offset {}", *off),
            ));
        }
        let s = &data[*off..*off + len];
        *off += len;
        Ok(s)
    };

    let mut vertices = Vec::with_capacity(n_vertices);
    for _ in 0..n_vertices {
        let b = take(&mut off, 12)?;
        let x = f32::from_le_bytes(b[0..4].try_into().unwrap());
        let y = f32::from_le_bytes(b[4..8].try_into().unwrap());
        let z = f32::from_le_bytes(b[8..12].try_into().unwrap());
        vertices.push(Vector3::new(f64::from(x), f64::from(y), f64::from(z)));
    }
    let mut faces = Vec::with_capacity(n_faces);
    for _ in 0..n_faces {
        let cnt = take(&mut off, 1)?[0] as usize;
        if cnt < 3 {
            return Err(parse_err(path, 0, "face with fewer than 3 indices"));
        }
        let b = take(&mut off, cnt * 4)?;
        let idx: Vec<u32> = b
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()) as u32)
            .collect();
        for k in 1..idx.len() - 1 {
            faces.push([idx[0], idx[k], idx[k + 1]]);
        }
    }
    TriangleMesh::new(vertices, faces, object_id)
}

fn save_ply(mesh: &TriangleMesh, path: &Path) -> Result<(), GeometryError> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.vertices().len(),
        mesh.faces().len()
    )?;
    for v in mesh.vertices() {
        w.write_all(&(v.x as f32).to_le_bytes())?;
        w.write_all(&(v.y as f32).to_le_bytes())?;
        w.write_all(&(v.z as f32).to_le_bytes())?;
    }
    for f in mesh.faces() {
        w.write_all(&[3u8])?;
        for &i in f {
            w.write_all(&(i as i32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn find_subsequence(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack
        .windows(needle.len())
        .position(|w| w == needle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn minimal_obj_loads() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("tri.obj");
        std::fs::write(&p, "# comment\nv 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\nf 1 2 3\n").unwrap();
        let m = load_mesh(&p).unwrap();
        assert_eq!(m.vertices().len(), 4);
        assert_eq!(m.faces().len(), 1);
        assert_eq!(m.object_id(), "tri");
    }

    #[test]
    fn malformed_obj_reports_line() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("bad.obj");
        std::fs::write(&p, "v 0 0 0\nv 1 oops 0\n").unwrap();
        match load_mesh(&p) {
            Err(GeometryError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn obj_roundtrip_exact() {
        let m = crate::geometry::mesh::tests::unit_cube(73.25);
        let dir = tempdir().unwrap();
        let p = dir.path().join("cube.obj");
        save_mesh(&m, &p).unwrap();
        let back = load_mesh(&p).unwrap();
        assert_eq!(back.vertices(), m.vertices());
        assert_eq!(back.faces(), m.faces());
    }

    #[test]
    fn ply_roundtrip_topology_and_f32_precision() {
        let m = crate::geometry::mesh::tests::unit_cube(12.125);
        let dir = tempdir().unwrap();
        let p = dir.path().join("cube.ply");
        save_mesh(&m, &p).unwrap();
        let back = load_mesh(&p).unwrap();
        assert_eq!(back.faces(), m.faces());
        for (a, b) in back.vertices().iter().zip(m.vertices()) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() <= f64::from(f32::EPSILON) * b[k].abs().max(1.0));
            }
        }
    }

    #[test]
    fn truncated_ply_is_rejected() {
        let m = crate::geometry::mesh::tests::unit_cube(10.0);
        let dir = tempdir().unwrap();
        let p = dir.path().join("cube.ply");
        save_mesh(&m, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 7]).unwrap();
        match load_mesh(&p) {
            Err(GeometryError::Parse { message, .. }) => {
                assert!(message.contains("truncated"), "{message}");
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }
}
