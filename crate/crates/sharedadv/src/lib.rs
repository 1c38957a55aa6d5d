//! File formats, experiment records and command implementations on top of
//! `sharedadv-core`.

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod data;
mod error;
pub mod idx;
pub mod records;
pub mod tensor_io;

pub use error::{Error, Result};
