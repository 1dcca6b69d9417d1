pub mod checkpoint;
pub mod cli;
pub mod datagen;
pub mod diagnostics;
pub mod encoders;
pub mod error;
pub mod generators;
pub mod inference;
pub mod numkernel;
pub mod pipeline;
pub mod promptlabels;
pub mod theory;

pub use error::{Error, Result};
