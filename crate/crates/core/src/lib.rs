//! Joint agglomerative clustering and embedding learning.
//!
//! This crate clusters a set of feature vectors by greedy agglomerative
//! merging over a *directed* K-nearest-neighbour affinity graph, and can
//! alternate those merges with training a small embedding network on
//! cluster-derived triplets so that the representation and the partition
//! improve together.
//!
//! The pieces compose bottom-up and each is usable on its own:
//!
//! * [`dataset`] — loading IDX/CSV data, synthetic blobs, row normalization.
//! * [`knn`] — exact KNN search and the directed sample affinity graph.
//! * [`affinity`] — cluster-level affinities on the graph (directed degree
//!   products) and the incremental merge-update rules.
//! * [`agglomerative`] — the greedy merge engine and its loss.
//! * [`embedding`] — a small MLP trained with a weighted triplet loss.
//! * [`driver`] — the alternating loop tying merges and training together.
//! * [`metrics`] — NMI, assignment accuracy, and 1-NN error.

pub mod affinity;
pub mod agglomerative;
pub mod dataset;
pub mod driver;
pub mod embedding;
pub mod knn;
pub mod metrics;

use thiserror::Error;

/// Errors reported by every fallible operation in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input data: bad magic numbers, ragged rows, non-finite
    /// values, unparsable fields.
    #[error("format error: {0}")]
    Format(String),

    /// A configuration value is out of its documented domain, or two
    /// settings contradict each other.
    #[error("config error: {0}")]
    Config(String),

    /// The affinity graph cannot support the requested operation, e.g. all
    /// samples are identical so the kernel bandwidth collapses to zero.
    #[error("degenerate graph: {0}")]
    DegenerateGraph(String),

    /// An operation was asked for in a state where it has no meaning, e.g.
    /// merging when a single cluster remains.
    #[error("logic error: {0}")]
    Logic(String),

    /// A vector that must be normalized has zero length.
    #[error("normalization error: {0}")]
    Normalization(String),

    /// Underlying I/O failure while reading or writing artifacts.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Convenient result alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;
