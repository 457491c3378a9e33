//! Latent-slot tokenization of frame-level feature sequences: a transformer
//! compressor with learned query slots, binary spherical quantization, slot
//! importance analysis, token-space editing and overlap-add resynthesis.

pub mod bsq;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod editor;
pub mod error;
pub mod importance;
pub mod linalg;
pub mod model;
pub mod ola;
pub mod probe;
pub mod scalar;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Matrix;

pub type Matrix32 = tensor::Matrix<f32>;
pub type Matrix64 = tensor::Matrix<f64>;
pub type ModelParams32 = model::ModelParams<f32>;
pub type ModelParams64 = model::ModelParams<f64>;
pub type CodeMatrix32 = bsq::CodeMatrix<f32>;
pub type CodeMatrix64 = bsq::CodeMatrix<f64>;
