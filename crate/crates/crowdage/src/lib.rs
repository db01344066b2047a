//! File formats, checkpoints and the command-line front end for
//! [`crowdage_core`].

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod image_io;

pub use error::{Error, Result};
