//! Subspace-orthogonal KV cache quantization.
//!
//! This crate implements a low-bit KV cache quantization engine built around
//! one idea: when a key tensor is quantized, the error it leaves behind should
//! be orthogonal to the subspace that query tensors live in, because attention
//! only sees keys through inner products with queries. Compression-only
//! quantizers minimize `‖k − deq(qtz(k))‖` and ignore where that error points.
//!
//! The pieces:
//!
//! - [`quant`] — uniform b-bit group quantization (zero-point + scale, packed
//!   codes).
//! - [`subspace`] — query subspace extraction via SVD, projections and
//!   deviation measurements.
//! - [`solver`] — the constrained-update core: inverse precomputation, the
//!   Schur-complement downdate chain, and the closed-form residual correction
//!   applied while quantizing key blocks. A dense KKT reference solver is
//!   included for verification.
//! - [`cache`] — the cache lifecycle: residual buffers, group flushing,
//!   prefill/decode, pre- vs post-rotation quantization, serialization.
//! - [`attention`] — masked attention replay over full-precision vs quantized
//!   caches, with output-deviation bounds and score-difference reports.
//! - [`trace`] — binary Q/K/V trace format and synthetic trace generation.

pub mod attention;
pub mod cache;
pub mod error;
pub mod quant;
pub mod report;
pub mod rope;
pub mod solver;
pub mod subspace;
pub mod trace;

pub use error::{Error, Result};
pub use quant::{dequantize_group, quantize_group, QuantParams, QuantizedGroup};
pub use subspace::{build_subspace, QuerySubspace};
