//! Library side of the `gridsight` command-line tool.

pub mod commands;
pub mod experiment;
pub mod render;
