//! File formats, checkpoints, configuration and the `tssc` command-line
//! front end for [`tssc_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod exec;
pub mod io;
pub mod logs;
pub mod preview;

pub use error::{Result, TsscError};
