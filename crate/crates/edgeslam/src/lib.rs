//! Datasets, file formats, the threaded pipeline and the command line for
//! [`edgeslam_core`].

pub mod api;
pub mod config;
pub mod dataset;
pub mod error;
pub mod imageio;
pub mod metrics;
pub mod pipeline;
pub mod ply;
pub mod synth;
pub mod tum;

pub use error::{Error, Result};
