//! Path-centric road graph extraction.
//!
//! Turns road and keypoint probability rasters into a vectorized road graph:
//!
//! 1. threshold both masks into scored candidates and thin them with a single
//!    unified non-maximum suppression pass ([`nms`]);
//! 2. pair surviving vertices by proximity into candidate edges ([`features`]);
//! 3. describe every candidate by geometric endpoint features and by
//!    traversability statistics sampled along the segment over a multi-scale
//!    road pyramid ([`features`]);
//! 4. score candidates with an edge-biased self-attention head ([`head`]);
//! 5. threshold, or average over overlapping patches for large images
//!    ([`assembly`]).
//!
//! The crate also carries the graph metrics used to evaluate results
//! ([`metrics`]), dataset curation and prompt simulation ([`dataset`]), and a
//! synthetic scene factory ([`synth`]).
//!
//! The crate is `no_std` + `alloc` when built without the default `std`
//! feature. File formats, the CLI and the annotation service live in the
//! `trailgraph` crate.

#![cfg_attr(not(feature = "std"), no_std)]
// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Single-group batches are written as `&[0..n]`.
#![cfg_attr(test, allow(clippy::single_range_in_vec_init))]

extern crate alloc;

pub mod assembly;
pub mod dataset;
mod error;
pub mod features;
pub mod head;
pub(crate) mod math;
pub mod metrics;
pub mod model;
pub mod nms;
pub mod raster;
pub mod synth;

pub use error::{Error, GraphIssue, Result};
pub use model::{
    ExtractionConfig, PatchLayout, Point, Polarity, PromptPoint, Raster, Rect, RoadGraph, Vertex,
};
