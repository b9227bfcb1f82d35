//! File formats, image sources, the training driver and command
//! implementations behind the `mgc` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod fit;
pub mod jsonl;
pub mod ppm;
