//! Inference-time attention controls for multi-frame, multi-subject story
//! generation, with a deterministic frame-loop simulator.
//!
//! - [`grounding`] / [`gca`]: Gaussian-centred subject masks from grounding
//!   boxes, turned into logit biases on the image-prompt attention branch.
//! - [`absvr`]: spectral rank selection on frame token embeddings, trunk
//!   reweighting and notch projection of the other frames.
//! - [`sfc`]: cross-frame key/value history with top-k selection, a forgetting
//!   bias, FIFO/reservoir capacity caps and background context mixing.
//! - [`pipeline`]: composes the three over synthetic stories.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the double-precision instantiation used by the simulator.

pub mod absvr;
pub mod error;
pub mod gca;
pub mod grounding;
pub mod io;
pub mod numkernel;
pub mod pipeline;
pub mod rng;
mod scalar;
pub mod sfc;

pub use error::{Error, Result};
pub use numkernel::{Matrix, SvdResult};
pub use scalar::Scalar;

pub type MatrixF64 = Matrix<f64>;
pub type MatrixF32 = Matrix<f32>;
pub type SvdF64 = SvdResult<f64>;
pub type SubjectMaskF64 = grounding::SubjectMask<f64>;
pub type AttentionBiasF64 = grounding::AttentionBias<f64>;
pub type GcaParamsF64 = grounding::GcaParams<f64>;
pub type AbsvrParamsF64 = absvr::AbsvrParams<f64>;

pub type SfcCacheF64 = sfc::SfcCache<f64>;
