//! Command line and HTTP front ends for the strata pipeline.

pub mod api;
pub mod cli;
pub mod server;
