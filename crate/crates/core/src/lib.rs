pub mod cfa;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod image;
pub mod losses;
pub mod masks;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod tfdec;

pub use error::{FtnError, Result};
pub use tensor::{Graph, ParamStore, Tensor, Var};
