pub mod config;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod numerics;
pub mod pipeline;
pub mod region;
pub mod walks;

pub use error::{Error, Result};
