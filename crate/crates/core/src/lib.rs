//! Cross-lingual soft-prompt transfer through a learned prompt translator.

pub mod checkpoint;
pub mod dataio;
pub mod encoder;
pub mod experiment;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod prompt;
pub mod rng;
pub mod synthlang;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod translator;

pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor, TensorError};
