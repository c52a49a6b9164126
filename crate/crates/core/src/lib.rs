//! Box-to-contour instance annotation: a Siamese correlation backbone, a
//! circular-convolution contour head, losses, metrics and training.
//!
//! Everything numeric is generic over [`scalar::Scalar`]; the aliases below
//! fix the usual instantiations.

pub mod backbone;
pub mod checkpoint;
pub mod data_io;
pub mod geometry;
pub mod head;
pub mod image;
pub mod loss;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Tape32 = tensor::Tape<f32>;
pub type Tape64 = tensor::Tape<f64>;
