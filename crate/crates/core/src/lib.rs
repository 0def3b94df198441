//! Single-phase filter pruning for small segmentation U-Nets.
//!
//! Every numeric type is generic over [`Scalar`] (`f64` or `f32`); the
//! aliases below fix the common `f64` and `f32` instantiations.

pub mod clusterlab;
pub mod harness;
pub mod losses;
pub mod optim;
pub mod pruner;
pub mod scalar;
pub mod segnet;
pub mod tensor;

pub use scalar::Scalar;
pub use tensor::{backward, Gradients, Tensor, TensorError};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Network64 = segnet::NetworkGraph<f64>;
pub type Network32 = segnet::NetworkGraph<f32>;
pub type Layer64 = segnet::PrunableConvLayer<f64>;
pub type Layer32 = segnet::PrunableConvLayer<f32>;
pub type Record64 = segnet::FeatureMapRecord<f64>;
pub type Record32 = segnet::FeatureMapRecord<f32>;
pub type Param64 = optim::Param<f64>;
pub type Param32 = optim::Param<f32>;
