//! Self-supervised pixel-embedding learning guided by visual concepts.
//!
//! The crate learns a D-dimensional unit embedding per pixel, supervised
//! only by pseudo image segments: pixels are attracted to their own segment
//! (local concepts), segments are quantized into a codebook of global
//! concepts, and pixels are additionally attracted to segments whose
//! concepts co-occur in the same image. Trained embeddings drive k-means
//! segmentation with nearest-neighbor label transfer, a linear probe, and
//! video mask propagation, all evaluated on deterministic synthetic scenes.

pub mod augment;
pub mod concepts;
pub mod data;
pub mod embeddings;
pub mod error;
pub mod eval;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod pseudoseg;
pub mod rng;
pub mod sweep;
pub mod trainer;
pub mod viz;

pub use error::{Error, Result};
