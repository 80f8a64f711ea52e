//! Command-line surface for the tempose library: synthetic data generation,
//! training, evaluation, and report merging. The binary in `main.rs` is a
//! thin argument parser over [`commands`].

pub mod commands;
pub mod config;
pub mod manifest;
