//! Multi-grained contrastive pretraining kernels.
//!
//! Everything in this crate is pure computation over caller-provided
//! buffers and runs under `no_std` with `alloc`: patch-overlap geometry and
//! correspondence targets, view augmentation with recorded crop geometry, a
//! small reverse-mode tape for the ViT backbone and its heads, the
//! multi-grained contrastive objective, and one optimizer step of the
//! pretraining loop. File formats, the training driver and the CLI live in
//! the `mgc` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod augment;
pub mod autograd;
pub mod contrast;
mod error;
pub mod geometry;
pub mod image;
pub mod matching;
mod math;
pub mod model;
pub mod oracle;
pub mod synthetic;
pub mod tensor;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use types::{CorrespondenceTable, CropBox, GranularitySet, KeyWeight, PatchGrid, QueryCorrespondences, Rect};
