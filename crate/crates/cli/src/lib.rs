//! Command-line tools and local HTTP service for facade inverse procedural
//! modeling. The binary is a thin wrapper over [`commands::run`].

pub mod commands;
pub mod config;
pub mod server;
pub mod svg;
