//! Depth-based 6D object pose estimation from viewpoint codebooks.
//!
//! The library estimates the full 6D pose (rotation + translation) of a known
//! rigid object from a single depth image and a segmentation mask. The
//! orientation is decomposed into an out-of-plane viewpoint, looked up in a
//! per-object codebook of learned depth embeddings, and an in-plane rotation
//! regressed against the retrieved view. Translation comes from a
//! back-projected initial estimate refined by a render-and-compare offset
//! correction and, optionally, ICP.
//!
//! Modules follow the processing stages:
//!
//! - [`geometry`]: rotations, poses, meshes, viewpoint sampling.
//! - [`render`]: CPU depth rasterizer and depth-image file I/O.
//! - [`nn`]: dense tensors, a reverse-mode tape over a fixed op set, Adam.
//! - [`model`]: the shared-backbone network, its three heads and losses.
//! - [`datagen`]: procedural training shapes, triplet sampling, augmentation.
//! - [`codebook`]: per-object viewpoint codebooks (build, query, persist).
//! - [`pipeline`]: the inference cascade from depth+mask to a final pose.
//! - [`metrics`]: ADD(-S)/VSD pose errors, recall, ablation sweeps.

pub mod codebook;
pub mod datagen;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod render;
pub mod seed;

pub use geometry::{CameraIntrinsics, Pose, Rotation, TriangleMesh};
