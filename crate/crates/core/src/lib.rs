//! Cluster-attention contextualization of multi-view image features for
//! query-based 3D detection, on a small reverse-mode tensor engine.

pub mod backbone;
pub mod bev;
pub mod camera;
pub mod cluster;
pub mod config;
pub mod error;
pub mod head;
pub mod lift;
pub mod model;
pub mod nn;
#[cfg(any(test, feature = "oracles"))]
pub mod oracle;
pub mod param;
pub mod scalar;
pub mod scene;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use param::{Init, Param, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::{Gradients, Graph, Tensor, Var};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type Graph32 = Graph<f32>;
pub type ParamStore64 = ParamStore<f64>;
