pub mod api;
pub mod bench;
pub mod checkpoint;
pub mod datagen;
pub mod enhance;
pub mod error;
pub mod image;
pub mod log_ops;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod trainer;

pub use error::{Error, Result};
pub use image::{GradientMap, Image};
