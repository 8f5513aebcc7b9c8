//! Dense tensors and a reverse-mode tape over them.

pub mod gradcheck;
pub mod kernels;
mod tape;
mod value;

pub use tape::{Grads, Tape, Var};
pub use value::{DType, Scalar, Tensor};

#[cfg(test)]
mod tests;
