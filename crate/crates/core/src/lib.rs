//! Pose regression on the SPD manifold.

pub mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod spd;
pub mod train;

pub use error::{Error, Result};
