//! Modality separation for domain adaptation with vision-language features.

pub mod cli;
pub mod dataio;
pub mod error;
pub mod losses;
pub mod mae;
pub mod mdi;
pub mod model;
pub mod numcore;
pub mod service;
pub mod trainer;

pub use error::{Error, Result};
