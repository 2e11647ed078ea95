//! Class-incremental continual learning with extended dark experience replay.

pub mod analysis;
pub mod buffer;
pub mod error;
pub mod losses;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod partitions;
pub mod rng;
pub mod stream;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;
