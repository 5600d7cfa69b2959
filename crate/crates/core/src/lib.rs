pub mod analysis;
pub mod cli;
pub mod data;
pub mod error;
pub mod finite_diff;
pub mod gradcheck;
pub mod io;
pub mod pooling;
pub mod retrieval;
pub mod rng;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
