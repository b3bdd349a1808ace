//! Masked-autoencoder pretraining and frozen-encoder ghost classification
//! for full-waveform LiDAR histograms.
//!
//! Everything runs on a small reverse-mode autodiff engine ([`graph`]) over
//! `f64` tensors. The model cuts an `H x W x T` tile into tube patches,
//! pretrains a transformer encoder by reconstructing masked tubes and
//! regressing per-patch peak statistics, then trains a two-layer head on the
//! frozen encoder to label every voxel as Object, Glass, Ghost or Noise.

pub mod checkpoint;
pub mod error;
pub mod graph;
pub mod infer;
pub mod model;
pub mod params;
pub mod targets;
pub mod tensor;
pub mod train;

pub use error::{NnError, Result};
pub use graph::{Graph, Var};
pub use model::{MaeConfig, Model};
pub use params::{AdamW, AdamWConfig, ParamStore};
pub use tensor::Tensor;
pub use train::TrainConfig;
