//! Command-line front end: simulate series, train generators (scoring-rule or
//! GAN, with learning-rate sweeps), evaluate them and reproduce the Lorenz
//! tables.

pub mod app;
pub mod commands;
pub mod config;
mod error;
pub mod pipeline;
pub mod reproduce;

pub use error::CliError;
