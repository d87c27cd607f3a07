pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod render;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
