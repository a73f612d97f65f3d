pub mod augment;
pub mod cli;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod network;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
