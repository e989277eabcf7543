pub mod data;
pub mod error;
pub mod fixtures;
pub mod hierarchy;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod train;
pub mod zrse;

pub use error::{Error, Result};
