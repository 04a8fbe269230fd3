//! Three-branch brain-tumor MRI classifier: instance-transfer boosting,
//! attention and capsule classifiers, and decision-template fusion, all on a
//! small reverse-mode autodiff core that is generic over the scalar type.

pub mod backbones;
pub mod capsnet;
pub mod classifier;
pub mod cnn;
pub mod error;
pub mod fusion;
pub mod nn;
pub mod pipeline;
pub mod scalar;
pub mod tensor;
pub mod tradaboost;
pub mod verify;
pub mod vit;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
