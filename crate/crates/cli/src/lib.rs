//! Command-line front end and HTTP service for the `stylefit` library.

pub mod commands;
pub mod config;
pub mod service;

pub use commands::{run, Cli};
