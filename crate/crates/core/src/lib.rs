pub mod attacks;
pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod contranet;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod metric;
pub mod nn;
pub mod pipeline;
pub mod saec;

pub use error::{Error, Result};
