pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod losses;
pub mod maskgen;
pub mod pipeline;
pub mod nn;
pub mod synthdata;

pub use error::{Error, Result};
