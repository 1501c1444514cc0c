pub mod analysis;
pub mod cli;
pub mod data;
pub mod error;
pub mod layers;
pub mod loss;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Gradients, Graph, Shape, Tensor, Var};
