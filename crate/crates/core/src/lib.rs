pub mod camera;
pub mod cli;
pub mod costmap;
pub mod error;
pub mod features;
pub mod field;
pub mod geometry;
pub mod image;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod optimizer;
pub mod synth;

pub use error::{Error, Result};
