pub mod combiners;
pub mod conflict;
pub mod diffcore;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod models;
pub mod optimizers;
pub mod problems;
pub mod rng;
pub mod teleport;

pub use error::{Error, Result};
