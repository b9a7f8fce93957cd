//! File formats, mask providers, multi-threaded tiled extraction, the
//! annotation service and the `trailgraph` command line, on top of
//! [`trailgraph_core`].

pub mod error;
pub mod formats;
pub mod pipeline;
pub mod cli;
pub mod provider;
pub mod service;

pub use error::{Error, Result};
pub use trailgraph_core as core;
