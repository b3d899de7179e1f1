//! Two-stage few-shot fine-grained recognition.
//!
//! A shared feature extractor runs on the raw image and on a refined crop of it.
//! The crop comes from a parameter-free background suppression step (channel-summed
//! activations, mean threshold, largest 8-connected component, tight box, zoom).
//! Support prototypes are aligned to each query through a row-softmaxed cosine
//! correlation matrix and compared cell by cell (local-to-local similarity). Two
//! global classifier heads over the base classes regularise training, with attentive
//! erasing applied ahead of the raw-stage head.

pub mod alignment;
pub mod backbone;
pub mod bas;
pub mod data;
pub mod episodic;
pub mod erasing;
pub mod error;
pub mod harness;
pub mod objective;

pub use error::{Error, Result};
