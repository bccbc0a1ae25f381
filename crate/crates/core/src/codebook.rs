//! Per-object viewpoint codebooks: build, query, persist.
//!
//! A codebook holds one record per sampled viewpoint: the unit embedding of
//! the rendered, preprocessed view and the full viewpoint rotation. Queries
//! are exact cosine-similarity scans; at N = 4000 and 64 dimensions a linear
//! scan is fast and deterministic, so there is no approximate index.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{sample_viewpoints, GeometryError, Rotation, TriangleMesh};
use crate::model::{ModelError, Network};
use crate::pipeline::{preprocess, PipelineError};
use crate::render::{render_codebook_view, RenderError, DEFAULT_CROP_FACTOR};

const MAGIC: &[u8; 4] = b"OVCB";
const VERSION: u16 = 1;

#[derive(Error, Debug)]
pub enum CodebookError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("render failed for viewpoint {index}: {source}")]
    ViewRender {
        index: usize,
        source: RenderError,
    },
    #[error("preprocess failed for viewpoint {index}: {source}")]
    ViewPreprocess {
        index: usize,
        source: PipelineError,
    },
    #[error("encode failed: {0}")]
    Encode(#[from] ModelError),
    #[error("geometry error: {0}")]
    Geometry(#[from] GeometryError),
    #[error("codebook file error ({path}): {message}")]
    Format { path: String, message: String },
    #[error("object '{0}' already registered")]
    AlreadyRegistered(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// One viewpoint entry: unit embedding plus the full rotation it was
/// rendered under.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookRecord {
    pub embedding: Vec<f32>,
    pub rotation: Rotation,
}

/// A persisted set of viewpoint records for one object.
#[derive(Debug, Clone)]
pub struct ViewpointCodebook {
    object_id: String,
    diameter_mm: f64,
    f_base: f64,
    records: Vec<CodebookRecord>,
    /// Path of the mesh the codebook was built from; in-memory metadata,
    /// not part of the file format.
    pub mesh_ref: Option<PathBuf>,
}

impl ViewpointCodebook {
    pub fn object_id(&self) -> &str {
        &self.object_id
    }

    pub fn diameter_mm(&self) -> f64 {
        self.diameter_mm
    }

    pub fn f_base(&self) -> f64 {
        self.f_base
    }

    pub fn records(&self) -> &[CodebookRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Exact top-k retrieval by cosine similarity, descending; ties broken
    /// by lower record index.
    pub fn retrieve(&self, query: &[f32], k: usize) -> Result<Vec<(usize, f64)>, CodebookError> {
        if k == 0 || k > self.records.len() {
            return Err(CodebookError::InvalidArgument(format!(
                "k = {k} outside 1..={}",
                self.records.len()
            )));
        }
        let dim = self.records[0].embedding.len();
        if query.len() != dim {
            return Err(CodebookError::InvalidArgument(format!(
                "query dimension {} vs codebook {dim}",
                query.len()
            )));
        }
        let qnorm: f64 = query.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        if (qnorm - 1.0).abs() > 1e-3 {
            return Err(CodebookError::InvalidArgument(format!(
                "query must be unit-norm (|q| = {qnorm})"
            )));
        }
        let mut scored: Vec<(usize, f64)> = self
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let dot: f64 = r
                    .embedding
                    .iter()
                    .zip(query)
                    .map(|(a, b)| f64::from(*a) * f64::from(*b))
                    .sum();
                (i, dot)
            })
            .collect();
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        scored.truncate(k);
        Ok(scored)
    }

    /// Write the codebook: magic `OVCB`, u16 version, object id (u16 length
    /// + UTF-8), f32 diameter, f32 f_base, u32 embedding dim, u32 record
    /// count, then per record the embedding and the row-major rotation, all
    /// little-endian f32.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CodebookError> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let id = self.object_id.as_bytes();
        if id.len() > u16::MAX as usize {
            return Err(CodebookError::InvalidArgument("object id too long".into()));
        }
        w.write_all(&(id.len() as u16).to_le_bytes())?;
        w.write_all(id)?;
        w.write_all(&(self.diameter_mm as f32).to_le_bytes())?;
        w.write_all(&(self.f_base as f32).to_le_bytes())?;
        let dim = self.records.first().map_or(0, |r| r.embedding.len());
        w.write_all(&(dim as u32).to_le_bytes())?;
        w.write_all(&(self.records.len() as u32).to_le_bytes())?;
        for r in &self.records {
            for v in &r.embedding {
                w.write_all(&v.to_le_bytes())?;
            }
            for v in r.rotation.to_row_major() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CodebookError> {
        let path = path.as_ref();
        let mut data = Vec::new();
        File::open(path)?.read_to_end(&mut data)?;
        let fail = |message: String| CodebookError::Format {
            path: path.display().to_string(),
            message,
        };
        let mut off = 0usize;
        let take = |off: &mut usize, len: usize| -> Result<&[u8], CodebookError> {
            if *off + len > data.len() {
                return Err(CodebookError::Format {
                    path: path.display().to_string(),
                    message: format!("truncated at byte {}", *off),
                });
            }
            let s = &data[*off..*off + len];
            *off += len;
            Ok(s)
        };
        if take(&mut off, 4)? != MAGIC {
            return Err(fail("bad magic (expected OVCB)".into()));
        }
        let version = u16::from_le_bytes(take(&mut off, 2)?.try_into().unwrap());
        if version != VERSION {
            return Err(fail(format!("unsupported version {version}")));
        }
        let id_len = u16::from_le_bytes(take(&mut off, 2)?.try_into().unwrap()) as usize;
        let object_id = String::from_utf8(take(&mut off, id_len)?.to_vec())
            .map_err(|_| fail("object id is not UTF-8".into()))?;
        let diameter = f32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
        let f_base = f32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
        let dim = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let count = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let emb_bytes = take(&mut off, dim * 4)?;
            let embedding: Vec<f32> = emb_bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let rot_bytes = take(&mut off, 9 * 4)?;
            let rot: Vec<f64> = rot_bytes
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                .collect();
            let rotation = Rotation::from_row_major(&rot.try_into().expect("9 values"))
                .map_err(|e| fail(format!("invalid rotation record: {e}")))?;
            records.push(CodebookRecord {
                embedding,
                rotation,
            });
        }
        if off != data.len() {
            return Err(fail(format!("{} trailing bytes", data.len() - off)));
        }
        Ok(Self {
            object_id,
            diameter_mm: f64::from(diameter),
            f_base: f64::from(f_base),
            records,
            mesh_ref: None,
        })
    }
}

/// Build a codebook: sample viewpoints, render each noise-free view at the
/// canonical geometry, run the standard preprocessing and encode.
/// Deterministic for a fixed network and parameters.
pub fn build_codebook(
    net: &Network<f32>,
    mesh: &TriangleMesh,
    n: usize,
    f_base: f64,
) -> Result<ViewpointCodebook, CodebookError> {
    if n < 2 {
        return Err(CodebookError::InvalidArgument(format!(
            "codebook needs at least 2 viewpoints, got {n}"
        )));
    }
    let viewpoints = sample_viewpoints(n)?;
    let diameter = mesh.diameter();

    const CHUNK: usize = 64;
    let chunks: Vec<(usize, &[Rotation])> = viewpoints
        .chunks(CHUNK)
        .enumerate()
        .map(|(i, c)| (i * CHUNK, c))
        .collect();
    let encoded: Result<Vec<Vec<CodebookRecord>>, CodebookError> = chunks
        .par_iter()
        .map(|(base, views)| {
            let mut crops = Vec::with_capacity(views.len());
            for (j, vp) in views.iter().enumerate() {
                let index = base + j;
                let frame = render_codebook_view(mesh, vp, f_base)
                    .map_err(|source| CodebookError::ViewRender { index, source })?;
                let pre = preprocess(&frame, &frame.mask(), diameter, DEFAULT_CROP_FACTOR, 50)
                    .map_err(|source| CodebookError::ViewPreprocess { index, source })?;
                crops.push(pre.crop);
            }
            let refs: Vec<&crate::pipeline::NormalizedCrop> = crops.iter().collect();
            let enc = net.encode_batch(&refs)?;
            Ok(views
                .iter()
                .zip(enc)
                .map(|(vp, e)| CodebookRecord {
                    embedding: e.embedding,
                    rotation: *vp,
                })
                .collect())
        })
        .collect();
    Ok(ViewpointCodebook {
        object_id: mesh.object_id().to_string(),
        diameter_mm: diameter,
        f_base,
        records: encoded?.into_iter().flatten().collect(),
        mesh_ref: None,
    })
}

/// Object-id keyed codebook registry: concurrent reads, single-writer
/// registration.
#[derive(Default)]
pub struct CodebookRegistry {
    inner: RwLock<HashMap<String, Arc<ViewpointCodebook>>>,
}

impl CodebookRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, cb: ViewpointCodebook) -> Result<(), CodebookError> {
        let mut map = self.inner.write().expect("registry lock");
        if map.contains_key(cb.object_id()) {
            return Err(CodebookError::AlreadyRegistered(cb.object_id().to_string()));
        }
        map.insert(cb.object_id().to_string(), Arc::new(cb));
        Ok(())
    }

    pub fn get(&self, object_id: &str) -> Option<Arc<ViewpointCodebook>> {
        self.inner.read().expect("registry lock").get(object_id).cloned()
    }

    pub fn ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .inner
            .read()
            .expect("registry lock")
            .keys()
            .cloned()
            .collect();
        ids.sort();
        ids
    }
}
