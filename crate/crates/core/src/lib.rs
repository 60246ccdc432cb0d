pub mod backbone;
pub mod editor;
pub mod error;
pub mod eval;
pub mod generation;
pub mod model;
pub mod pipeline;
pub mod scoring;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod training;

pub use error::{Error, Result};
