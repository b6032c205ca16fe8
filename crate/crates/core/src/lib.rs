//! Knowledge-graph-fused passage reading.
//!
//! The crate builds localized bipartite graphs that connect entities in a
//! question to entities in a retrieved passage through knowledge-graph
//! relations, runs a relation-aware attention network over those graphs, and
//! fuses the result back into a split transformer encoder so the decoder can
//! condition on structure the text alone does not state.
//!
//! Everything numeric is generic over [`Scalar`], so the same model code runs
//! in `f32` for speed or `f64` for gradient checking.

pub mod evalkit;
pub mod kgstore;
pub mod localgraph;
pub mod reader;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod textproc;

pub use scalar::Scalar;

/// Single-precision tensor, the default for training.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision tensor, used when checking gradients numerically.
pub type Tensor64 = tensor::Tensor<f64>;
/// Single-precision reader, the default for training.
pub type Reader32 = reader::Reader<f32>;
/// Double-precision reader, used when checking gradients numerically.
pub type Reader64 = reader::Reader<f64>;
