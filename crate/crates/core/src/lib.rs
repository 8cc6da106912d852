//! Open-vocabulary event instance segmentation.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`events`]: event streams, windowing and voxel-grid conversion
//! - [`mask`]: binary masks, COCO-style run-length encoding, boxes and IoU
//! - [`guidance`]: hierarchical visual/text teacher guidance and pluggable providers
//! - [`tensor`] / [`autograd`]: the small dense-matrix and reverse-mode tape the network runs on
//! - [`model`]: backbone, language fusion, promptable mask decoder, mask pooling,
//!   spatial encoding, mask feature enhancer and open-vocabulary classification
//! - [`training`]: the two-stage distillation trainer
//! - [`synth`]: deterministic synthetic scenes, events and teacher providers for desk-scale runs
//! - [`benchmark`]: benchmark construction, prompt sampling, AP, profiling and feature export

pub mod autograd;
pub mod benchmark;
pub mod error;
pub mod events;
pub mod guidance;
pub mod mask;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
