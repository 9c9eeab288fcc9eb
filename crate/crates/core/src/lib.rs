//! Few-shot point cloud semantic segmentation with contrastive pretraining,
//! multi-resolution attention, center-regularized prototypes and transductive
//! label propagation.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! name the common instantiations.

pub mod augmentor;
pub mod autodiff;
pub mod checkpoint;
pub mod contrastive;
pub mod data;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod labelprop;
pub mod linalg;
pub mod mra;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod prototypes;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Matrix;

pub type Matrix32 = tensor::Matrix<f32>;
pub type Matrix64 = tensor::Matrix<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type Encoder32 = encoder::Encoder<f32>;
pub type Encoder64 = encoder::Encoder<f64>;
pub type PointCloud32 = data::PointCloud<f32>;
pub type PointCloud64 = data::PointCloud<f64>;
