//! Dataset pipeline, checkpoint files, training driver and command line for
//! emotion-conditioned music generation. The models and algorithms live in
//! `emogen-core`.

pub mod checkpoint;
pub mod cli;
pub mod client;
pub mod config;
pub mod corpus;
pub mod files;
pub mod fit;
pub mod reports;
pub mod synthetic;

pub use emogen_core as core;
