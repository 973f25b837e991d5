pub mod bank;
pub mod config;
pub mod engine;
pub mod error;
pub mod model;
pub mod predictor;
pub mod qa;
pub mod registry;
pub mod retrieval;
pub mod scheduler;
pub mod text;
pub mod trace;

pub use error::{Error, Result};
