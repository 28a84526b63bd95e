//! Experiment harness: configuration, data, models, the training loop and
//! the experiments behind the command-line tool.

pub mod config;
pub mod data;
pub mod experiments;
pub mod model;
pub mod train;
