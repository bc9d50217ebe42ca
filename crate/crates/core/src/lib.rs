pub mod aligner;
pub mod autodiff;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod model;
pub mod pipeline;
pub mod trainer;

pub use error::{Error, Result};
