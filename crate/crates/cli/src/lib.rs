//! Library side of the `semu` command line tool.

pub mod compare;
pub mod config;
pub mod error;
pub mod pipeline;
