//! File formats, configuration and command-line front end for the
//! `omc_core` tracking pipeline.

pub mod commands;
pub mod config;
pub mod frame_io;
