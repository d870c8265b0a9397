pub mod config;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod pipeline;
pub mod train;

pub use error::{Error, Result};
