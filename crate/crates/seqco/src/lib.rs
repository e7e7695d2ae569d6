//! Sequence-level contrastive training for abstractive summarization.

pub mod attention;
pub mod autodiff;
pub mod corpus;
pub mod decoding;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optim;
pub mod params;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use model::{ModelConfig, TokenSequence, Transformer};
pub use params::{ParamId, ParamStore};
pub use tensor::{Tensor, TensorError};
