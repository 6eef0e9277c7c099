//! Configuration, dispatch and report writing for the `wienerlab` binary.

pub mod config;
pub mod error;
pub mod experiment;
pub mod output;
pub mod sweep;
