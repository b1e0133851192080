// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod analysis;
pub mod autodiff;
pub mod bigram;
pub mod corpus;
pub mod error;
pub mod mask;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod eval;
pub mod report;

pub use corpus::{TokenStream, Vocab};
pub use error::{Error, Result};
pub use mask::{BinaryMask, MaskSet};
pub use model::{Checkpoint, ModelConfig, ParamSet};
pub use tensor::Tensor;
