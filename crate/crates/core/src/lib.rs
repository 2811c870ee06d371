pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod decoder;
pub mod encoder;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod render;
pub mod scene;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Grads, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
