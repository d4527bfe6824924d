//! Minimal reverse-mode differentiation engine and the networks built on it.

pub mod checkpoint;
pub mod graph;
pub mod models;
pub mod params;
pub mod tensor;
pub mod unet;

pub use graph::{Gradients, Graph, Var};
pub use params::{Adam, Param, ParamSet};
pub use tensor::{Scalar, Tensor};
pub use unet::{UNet, UNetConfig};
