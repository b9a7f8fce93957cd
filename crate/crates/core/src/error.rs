use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid graph: {}", DisplayIssues(.0))]
    InvalidGraph(Vec<GraphIssue>),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("mask provider failed for patch ({}, {}): {message}", .origin.0, .origin.1)]
    Provider {
        origin: (usize, usize),
        message: String,
    },
    #[error("empty reference graph")]
    EmptyReference,
    #[error("no negative region left after dilation")]
    NoNegativeRegion,
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

/// One offending edge found while validating a [`crate::RoadGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphIssue {
    SelfLoop { edge: usize, vertex: usize },
    IndexOutOfRange { edge: usize, index: usize, len: usize },
    DuplicateEdge { edge: usize, first: usize },
    NonFiniteVertex { vertex: usize },
}

impl fmt::Display for GraphIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            GraphIssue::SelfLoop { edge, vertex } => {
                write!(f, "edge {edge}: self-loop on vertex {vertex}")
            }
            GraphIssue::IndexOutOfRange { edge, index, len } => {
                write!(f, "edge {edge}: index out of range ({index} >= {len})")
            }
            GraphIssue::DuplicateEdge { edge, first } => {
                write!(f, "edge {edge}: duplicate edge (first seen as edge {first})")
            }
            GraphIssue::NonFiniteVertex { vertex } => {
                write!(f, "vertex {vertex}: non-finite coordinate")
            }
        }
    }
}

struct DisplayIssues<'a>(&'a [GraphIssue]);

impl fmt::Display for DisplayIssues<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, issue) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{issue}")?;
        }
        Ok(())
    }
}
