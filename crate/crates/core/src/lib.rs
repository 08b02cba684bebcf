//! Alignment-controlled language-model training on synthetic neural recordings.

pub mod align;
pub mod autograd;
pub mod error;
pub mod grammar;
pub mod encoding;
pub mod io;
pub mod linalg;
pub mod model;
pub mod neural;
pub mod probe;
pub mod pipeline;
pub mod pretrain;
pub mod seeds;
pub mod stats;

pub use error::{Error, Result};
