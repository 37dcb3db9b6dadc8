//! Neural networks that learn their own per-channel bit depths and shed
//! channels that reach zero bits while they train.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod network;
pub mod optim;
pub mod pruner;
pub mod quantizer;
pub mod run;
pub mod size;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
