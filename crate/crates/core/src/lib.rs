pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod evaluation;
pub mod kv;
pub mod model;
pub mod nn;
pub mod signal;
pub mod synthesizer;
pub mod training;
pub mod translator;

pub use error::{Error, Result};
