//! Joint learning of a causal DAG over categorical latent features and a
//! Gaussian-mixture-prior multimodal variational autoencoder.
//!
//! The math layer (`tensor`, `dag`, `joint`, `gmm`, `codec`, `elbo`) is
//! generic over [`Scalar`]; training, data generation and reporting run in f64.

pub mod codec;
pub mod dag;
pub mod data;
pub mod datagen;
pub mod elbo;
pub mod error;
pub mod gmm;
pub mod gradcheck;
pub mod joint;
pub mod report;
pub mod scalar;
pub mod store;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph64 = tensor::Graph<f64>;
pub type Graph32 = tensor::Graph<f32>;
pub type DagParams64 = dag::DagParams<f64>;
pub type DagParams32 = dag::DagParams<f32>;
pub type CausalTables64 = joint::CausalTables<f64>;
pub type CausalTables32 = joint::CausalTables<f32>;
pub type LatentGmm64 = gmm::LatentGmm<f64>;
pub type LatentGmm32 = gmm::LatentGmm<f32>;
