//! Serving layer: the HTTP API and the `esq` command line.

pub mod api;
pub mod cli;
pub mod engine;
