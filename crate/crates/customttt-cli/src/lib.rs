//! Library surface behind the `customttt` binary: run configuration,
//! command implementations, run manifests, and artifact/chart writers.
//! The binary stays a thin argument-parsing shell over this crate so
//! integration tests can drive and verify runs through the same code.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod manifest;
pub mod plot;
