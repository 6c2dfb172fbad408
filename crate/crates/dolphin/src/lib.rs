//! Files, configuration and the `dolphin` command line on top of
//! `dolphin-core`.

pub mod backend;
pub mod blob;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod fsio;
pub mod report;

pub use config::RunConfig;
pub use error::{AppError, Result};
