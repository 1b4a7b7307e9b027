//! Quantization-aware training for re-parametrized convolution blocks.
//!
//! The crate provides a small reverse-mode tensor engine ([`Graph`]),
//! differentiable merged weights for multi-branch blocks ([`reparam`]),
//! batch-norm folding and statistics estimation ([`batchnorm`]), and an
//! LSQ-style pseudo-quantizer ([`quant`]). Everything is generic over the
//! scalar type: training uses `f32`, oracles and gradient checks use `f64`.

pub mod batchnorm;
pub mod conv;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod quant;
pub mod reparam;
pub mod scalar;
pub mod tensor;

pub use batchnorm::{BnState, Mode, StatsMethod};
pub use conv::{conv2d, conv_as_matmul_sum, ConvSpec};
pub use error::{Error, Result};
pub use graph::{CostKind, Graph, MultCounts, QuantParams, Var};
pub use kernels::Padding;
pub use params::{Bindings, ParamId, ParamKind, ParamStore};
pub use quant::{product_bits, Granularity, QuantRange, Quantizer};
pub use reparam::{MergeOptions, Primitive, ReparamBlock, Topology};
pub use scalar::Scalar;
pub use tensor::{flatten_bhd, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
