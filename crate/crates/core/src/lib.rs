pub mod category;
pub mod checkpoint;
pub mod data;
pub mod diagnosis;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod superpixel;
pub mod train;
pub mod types;

pub use error::{Error, Result};
