pub mod audio;
pub mod autodiff;
pub mod config;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod stack;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use stack::LayerStack;
pub use tensor::{Real, Tensor};
