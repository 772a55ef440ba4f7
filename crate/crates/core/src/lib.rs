//! Multi-path Transformer encoder sublayers with PathNorm, learnable
//! weighted fusion and cheap combined features, built on a small `f64`
//! reverse-mode autodiff engine.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`], [`tape`], [`gradcheck`]: dense tensors, the autodiff tape
//!   and a central-difference gradient oracle.
//! * [`nn`]: attention, feed-forward, layer normalization, embeddings.
//! * [`multipath`]: multi-path sublayers and their fusion.
//! * [`model`]: encoder/decoder assembly, parameter accounting, checkpoints
//!   and the fusion-weight diversity report.
//! * [`train`]: Adam, the warmup schedule, synthetic tasks and a whole-model
//!   gradient check.
//! * [`path_bench`]: wall-clock cost of multi-path sublayers.

pub mod error;
pub mod gradcheck;
pub mod model;
pub mod multipath;
pub mod nn;
pub mod params;
pub mod path_bench;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{build_model, param_count, Model, ModelConfig, ParamBreakdown};
pub use multipath::{FixedWeightMode, MultiPathConfig};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tape::{AttnLayout, AttnSegment, ExecMode, Tape, Var};
pub use tensor::Tensor;
