//! Command-line front end for the hyperkg link-prediction engine.

pub mod checkpoint;
pub mod commands;
pub mod config;
