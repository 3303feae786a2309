pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod nn;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
