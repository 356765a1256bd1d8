//! Command line front end for `idm-core`: configuration files, run
//! directories, checkpoints and dataset export.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset_io;
pub mod error;
pub mod run;
