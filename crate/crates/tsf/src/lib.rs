//! File formats, run configuration, parallel evaluation, ablation and
//! benchmark harnesses, and the `tsf` command-line tool built on
//! [`tsf_core`].

pub mod ablation;
pub mod bench;
pub mod cli;
pub mod config;
pub mod formats;
pub mod maps;
pub mod pipeline;
pub mod selftest;

pub use tsf_core;
