//! Library surface of the experiment runner: named specs, config
//! schema, command dispatch, and the acceptance suite. The `toruslab`
//! binary is a thin argument parser over these modules.

pub mod builtin;
pub mod commands;
pub mod config;
pub mod suite;
