pub mod bridge;
pub mod compressor;
pub mod diagnostics;
pub mod error;
pub mod masking;
pub mod pipeline;
pub mod tensor;
pub mod tokenizer;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
