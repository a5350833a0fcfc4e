//! Median-of-means minimax regression.

pub mod block_stats;
pub mod datagen;
pub mod error;
pub mod harness;
pub mod model;
pub mod numeric;
pub mod objective;
pub mod regularizer;
pub mod solver;
pub mod verify;

pub use error::{MomError, Result};
