//! Block-sparse INT8 inference for transformer encoders.
//!
//! The crate covers the whole path from an f32 model to a served INT8
//! model: block pruning ([`pruner`]), calibration and quantization
//! ([`quantizer`]), block-sparse kernels ([`kernels`]), a graph IR with
//! lowering and fusion ([`graph`]), sessions with arena allocation
//! ([`runtime`]), a versioned bundle format ([`model_io`]) and the
//! benchmark harness ([`bench`]).
//!
//! Numeric code is generic over the scalar where it makes sense; the
//! aliases below name the concrete instantiations used by the runtime.

pub mod bench;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod model_io;
pub mod pruner;
pub mod quantizer;
pub mod runtime;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, DynTensor, Element, Granularity, QuantParams, QuantTarget, Tensor};

pub type TensorF32 = Tensor<f32>;
pub type TensorF64 = Tensor<f64>;
pub type TensorI8 = Tensor<i8>;
pub type TensorU8 = Tensor<u8>;
pub type TensorI32 = Tensor<i32>;
