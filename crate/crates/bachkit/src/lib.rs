//! Operational surface of the layout engine: configuration, preview
//! rendering, the HTTP API and the `bachkit` command line.

pub mod api;
pub mod cli;
pub mod config;
pub mod preview;
pub mod service;
