pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod layers;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod planner;
pub mod synth;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
