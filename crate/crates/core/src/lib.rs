pub mod config;
pub mod conv;
pub mod datagen;
pub mod dataset;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod harness;
pub mod metrics;
pub mod ndsm;
pub mod pointcloud;
pub mod segnet;
pub mod stats;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
