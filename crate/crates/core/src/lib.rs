//! Multi-domain neural machine translation with unsupervised domain
//! clustering, a distilled domain discriminator and per-domain residual
//! experts routed by Gumbel-Max sampling.

pub mod checkpoint;
pub mod cluster;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use params::ParamStore;
pub use rng::RngStream;
pub use scalar::Scalar;
pub use tensor::{Graph, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
