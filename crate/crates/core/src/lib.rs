pub mod analysis;
pub mod cache;
pub mod clip;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod nn;
pub mod prompt;
pub mod train;
pub mod types;

pub use error::{Error, Result};
