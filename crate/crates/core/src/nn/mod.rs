//! Minimal convolutional network engine: channel-major tensors, im2col
//! convolutions on top of `matrixmultiply`, batch normalization, residual
//! blocks and SGD. Every layer has an explicit backward pass.

mod gemm;
pub mod layers;
pub mod models;
pub mod optim;
pub mod params;
pub mod resnet;
pub mod tensor;

pub use layers::NormMode;
pub use models::{ClassifierNet, Encoder, EncoderTrace};
pub use optim::Sgd;
pub use params::{digest_f32, Layout, ModelState, TensorSpec};
pub use resnet::{Backbone, BackboneConfig, BackboneOutput, BackboneTrace};
pub use tensor::{Mat, Tensor};
