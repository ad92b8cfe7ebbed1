pub mod checkpoint;
pub mod compute;
pub mod embeddings;
pub mod error;
pub mod eval;
pub mod features;
pub mod mine;
pub mod model;
pub mod synth;
pub mod text;
pub mod train;

pub use error::{Error, Result};
