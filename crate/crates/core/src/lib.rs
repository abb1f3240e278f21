pub mod error;
pub mod nn;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub mod avatar;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod dae;
pub mod diffusion;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod speech2latent;
pub mod stats;
pub mod video;

pub type TensorF32 = Tensor<f32>;
pub type TensorF64 = Tensor<f64>;
pub type DaeModelF32 = dae::DaeModel<f32>;
pub type DaeModelF64 = dae::DaeModel<f64>;
pub type Speech2LatentF32 = speech2latent::Speech2LatentModel<f32>;
pub type Speech2LatentF64 = speech2latent::Speech2LatentModel<f64>;
