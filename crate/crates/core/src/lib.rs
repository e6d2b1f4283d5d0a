pub mod bits;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod model;
pub mod neuron;
pub mod ops;
pub mod quant;
pub mod renewal;
pub mod train;
pub mod theory;

pub use error::{Error, Result};
