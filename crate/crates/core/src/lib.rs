pub mod bench;
pub mod caps;
pub mod error;
pub mod grouping;
pub mod io;
pub mod knn;
pub mod metrics;
pub mod octree;
mod packed;
pub mod pipeline;
pub mod scene;
pub mod selftest;
pub mod synth;
pub mod voxel;

pub use error::{Error, Result};
