pub mod analysis;
pub mod aspp;
pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod linear;
pub mod params;
pub mod segmenter;
pub mod tensor;

pub use autodiff::{FlopCounter, Gradients, Graph, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore, Session};
pub use tensor::Tensor;
