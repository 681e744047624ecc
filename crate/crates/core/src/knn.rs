//! Directed K-nearest-neighbour graph and the sparse sample affinity matrix.
//!
//! Each sample points at its `Ks` nearest neighbours under squared Euclidean
//! distance; the edge weight decays exponentially with distance relative to a
//! bandwidth `sigma2` derived from the data itself. The graph is directed by
//! design: `i` may be among `j`'s neighbours without the converse holding,
//! and that asymmetry is what the cluster-level affinities feed on.

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use std::io::Write;

use crate::{Error, Result};

/// Directed KNN graph with exponential edge weights.
///
/// `neighbors[i]` lists the `min(Ks, n_s - 1)` nearest samples to `i` by
/// ascending squared distance (ties broken toward the lower index) and
/// `weights[i]` holds the matching `W(i, j)` values. `in_edges[j]` is the
/// transposed view — every `(i, W(i, j))` with an edge into `j`, sorted by
/// source index — kept so that column sums over a cluster are as cheap as
/// row sums.
#[derive(Debug, Clone)]
pub struct SampleAffinityGraph {
    n_s: usize,
    ks: usize,
    sigma2: f64,
    neighbors: Vec<Vec<u32>>,
    weights: Vec<Vec<f64>>,
    in_edges: Vec<Vec<(u32, f64)>>,
}

impl SampleAffinityGraph {
    /// Number of samples.
    pub fn n_samples(&self) -> usize {
        self.n_s
    }

    /// Effective neighbours per sample (requested `Ks` clamped to `n_s - 1`).
    pub fn ks(&self) -> usize {
        self.ks
    }

    /// Kernel bandwidth used for the edge weights.
    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    /// Neighbour indices of `i`, ascending by distance.
    pub fn neighbors(&self, i: usize) -> &[u32] {
        &self.neighbors[i]
    }

    /// Outgoing edges of `i` as `(target, weight)`, ascending by distance.
    pub fn out_edges(&self, i: usize) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.neighbors[i]
            .iter()
            .copied()
            .zip(self.weights[i].iter().copied())
    }

    /// Incoming edges of `j` as `(source, weight)`, ascending by source.
    pub fn in_edges(&self, j: usize) -> &[(u32, f64)] {
        &self.in_edges[j]
    }

    /// `W(i, j)`: the stored weight of edge `i -> j`, or 0 when absent.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.neighbors[i]
            .iter()
            .position(|&t| t as usize == j)
            .map_or(0.0, |p| self.weights[i][p])
    }

    /// Assembles a graph from pre-computed parts. Intended for fixtures and
    /// for rebuilding after an embedding update; callers must keep
    /// `neighbors[i]` and `weights[i]` aligned.
    pub fn from_parts(
        neighbors: Vec<Vec<u32>>,
        weights: Vec<Vec<f64>>,
        sigma2: f64,
    ) -> Result<Self> {
        if neighbors.len() != weights.len() {
            return Err(Error::Logic(format!(
                "neighbor lists ({}) and weight lists ({}) differ in length",
                neighbors.len(),
                weights.len()
            )));
        }
        for (i, (ns, ws)) in neighbors.iter().zip(&weights).enumerate() {
            if ns.len() != ws.len() {
                return Err(Error::Logic(format!(
                    "row {i}: {} neighbors but {} weights",
                    ns.len(),
                    ws.len()
                )));
            }
        }
        let n_s = neighbors.len();
        let ks = neighbors.iter().map(Vec::len).max().unwrap_or(0);
        let in_edges = transpose_edges(n_s, &neighbors, &weights);
        Ok(Self {
            n_s,
            ks,
            sigma2,
            neighbors,
            weights,
            in_edges,
        })
    }

    /// Writes the nonzero entries as coordinate-list text, one
    /// `source target weight` triple per line, for debugging.
    pub fn write_coo<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for i in 0..self.n_s {
            for (j, w) in self.out_edges(i) {
                writeln!(out, "{i} {j} {w}")?;
            }
        }
        Ok(())
    }
}

fn transpose_edges(
    n_s: usize,
    neighbors: &[Vec<u32>],
    weights: &[Vec<f64>],
) -> Vec<Vec<(u32, f64)>> {
    let mut in_edges = vec![Vec::new(); n_s];
    for (i, (ns, ws)) in neighbors.iter().zip(weights).enumerate() {
        for (&j, &w) in ns.iter().zip(ws) {
            in_edges[j as usize].push((i as u32, w));
        }
    }
    // Source indices arrive in ascending order already because the outer
    // loop runs over `i`; keep the explicit sort as a guard for callers of
    // `from_parts` with unusual layouts.
    for list in &mut in_edges {
        list.sort_unstable_by_key(|&(i, _)| i);
    }
    in_edges
}

/// Squared Euclidean distance between two feature rows.
pub fn squared_distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Exact K-nearest neighbours of every row under squared Euclidean distance.
///
/// Ties are broken toward the lower sample index. `ks` is clamped to
/// `n_s - 1` (with a logged warning) since a sample is never its own
/// neighbour. Rows are processed in parallel; the output is independent of
/// the thread count.
pub fn build_knn(x: &Array2<f64>, ks: usize) -> Result<Vec<Vec<u32>>> {
    let n = x.nrows();
    if ks == 0 {
        return Err(Error::Config("ks must be at least 1".into()));
    }
    if n < 2 {
        return Err(Error::Config(format!(
            "knn needs at least 2 samples, got {n}"
        )));
    }
    let k = if ks > n - 1 {
        log::warn!("ks={ks} exceeds n_s-1={}; clamping", n - 1);
        n - 1
    } else {
        ks
    };
    let lists: Vec<Vec<u32>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let row = x.row(i);
            let mut cand: Vec<(f64, u32)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (squared_distance(row, x.row(j)), j as u32))
                .collect();
            let kth = k - 1;
            cand.select_nth_unstable_by(kth, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cand.truncate(k);
            cand.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cand.into_iter().map(|(_, j)| j).collect()
        })
        .collect();
    Ok(lists)
}

/// Kernel bandwidth: the mean squared distance between a sample and its
/// neighbours, scaled by `a`. With lists of uniform length `k` this is
/// `a / (n_s * k) * sum_i sum_{j in N_i} ||x_i - x_j||^2`.
pub fn sigma_squared(x: &Array2<f64>, neighbors: &[Vec<u32>], a: f64) -> Result<f64> {
    if a.is_nan() || a <= 0.0 {
        return Err(Error::Config(format!(
            "affinity scale a must be positive, got {a}"
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, list) in neighbors.iter().enumerate() {
        let row = x.row(i);
        for &j in list {
            total += squared_distance(row, x.row(j as usize));
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::DegenerateGraph(
            "no neighbor edges to estimate bandwidth from".into(),
        ));
    }
    let sigma2 = a * total / count as f64;
    if sigma2 <= 0.0 {
        return Err(Error::DegenerateGraph(
            "all samples are identical; kernel bandwidth collapsed to zero".into(),
        ));
    }
    Ok(sigma2)
}

/// Builds the directed sample affinity graph:
/// `W(i, j) = exp(-||x_i - x_j||^2 / sigma2)` when `j` is among `i`'s `ks`
/// nearest neighbours and 0 otherwise.
pub fn sample_affinity(x: &Array2<f64>, ks: usize, a: f64) -> Result<SampleAffinityGraph> {
    let neighbors = build_knn(x, ks)?;
    let sigma2 = sigma_squared(x, &neighbors, a)?;
    let weights: Vec<Vec<f64>> = neighbors
        .par_iter()
        .enumerate()
        .map(|(i, list)| {
            let row = x.row(i);
            list.iter()
                .map(|&j| (-squared_distance(row, x.row(j as usize)) / sigma2).exp())
                .collect()
        })
        .collect();
    let n_s = x.nrows();
    let ks_eff = neighbors.first().map_or(0, Vec::len);
    let in_edges = transpose_edges(n_s, &neighbors, &weights);
    Ok(SampleAffinityGraph {
        n_s,
        ks: ks_eff,
        sigma2,
        neighbors,
        weights,
        in_edges,
    })
}
