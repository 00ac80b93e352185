pub mod checkpoint;
pub mod clustering;
pub mod contrastive;
pub mod error;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod segmentation;
pub mod synthgen;
pub mod tensor;
pub mod vae;

pub use error::{Error, Result};
