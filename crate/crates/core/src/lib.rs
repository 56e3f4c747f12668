//! Two-stage surgical-tool keypoint tracking toolkit.
//!
//! Stage one segments small regions (keypoint ROIs) around tool keypoints,
//! using either a single-frame model or a multi-frame-context model that
//! fuses per-frame segmentations with optical-flow and depth maps. Stage two
//! localizes keypoints as centroids of the largest segmentation blobs.
//!
//! The crate is self-contained: it ships its own tensor/autodiff core, a
//! deterministic synthetic scene generator for desk-scale training, and the
//! full train/infer/evaluate pipeline.

pub mod dataio;
pub mod error;
pub mod flowdepth;
pub mod localize;
pub mod metrics;
pub mod models;
pub mod pipeline;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
