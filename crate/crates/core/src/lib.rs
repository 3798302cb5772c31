pub mod dataset;
pub mod diff;
pub mod error;
pub mod evaluation;
pub mod models;
pub mod scoring;
pub mod simulate;
pub mod training;

pub use error::{Error, Result};
