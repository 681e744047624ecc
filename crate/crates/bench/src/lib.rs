//! Shared fixtures for the criterion benchmarks. The interesting code lives
//! in `benches/`; this crate exists so the workspace has one place for
//! benchmark inputs that stay comparable across runs.

use jule_core::dataset::{make_blobs, Dataset};

/// A moderately overlapping blob mixture sized for kernel benchmarks.
pub fn bench_blobs(k: usize, n_per: usize, d: usize) -> Dataset {
    make_blobs(k, n_per, d, 1.0, 4.0, 42).expect("fixture parameters are valid")
}
