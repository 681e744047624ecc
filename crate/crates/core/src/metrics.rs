//! Clustering evaluation: normalized mutual information, best-assignment
//! accuracy, and 1-nearest-neighbour classification error.
//!
//! All metrics treat cluster ids as opaque: any relabeling of either
//! argument leaves the scores unchanged.

use ndarray::{Array2, ArrayView2};

use crate::knn::squared_distance;
use crate::{Error, Result};

/// Joint count table of two labelings over the same samples.
#[derive(Debug, Clone)]
pub struct ContingencyTable {
    /// `k_a x k_b` joint counts.
    pub counts: Array2<usize>,
    /// Row marginals (counts of each label in `a`).
    pub rows: Vec<usize>,
    /// Column marginals (counts of each label in `b`).
    pub cols: Vec<usize>,
    /// Total number of samples.
    pub n: usize,
}

impl ContingencyTable {
    /// Builds the table; distinct labels are indexed in ascending order.
    pub fn from_labels(a: &[u32], b: &[u32]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::Logic(format!(
                "label vectors differ in length: {} vs {}",
                a.len(),
                b.len()
            )));
        }
        if a.is_empty() {
            return Err(Error::Logic("cannot tabulate zero samples".into()));
        }
        let index = |labels: &[u32]| {
            let mut distinct: Vec<u32> = labels.to_vec();
            distinct.sort_unstable();
            distinct.dedup();
            distinct
        };
        let (da, db) = (index(a), index(b));
        let pos = |d: &[u32], l: u32| d.binary_search(&l).unwrap();
        let mut counts = Array2::<usize>::zeros((da.len(), db.len()));
        for (&la, &lb) in a.iter().zip(b) {
            counts[[pos(&da, la), pos(&db, lb)]] += 1;
        }
        let rows: Vec<usize> = counts.rows().into_iter().map(|r| r.sum()).collect();
        let cols: Vec<usize> = counts.columns().into_iter().map(|c| c.sum()).collect();
        Ok(Self {
            counts,
            rows,
            cols,
            n: a.len(),
        })
    }
}

fn entropy(marginals: &[usize], n: f64) -> f64 {
    marginals
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information `I(a;b) / sqrt(H(a) * H(b))` with natural
/// logarithms, clamped to `[0, 1]`.
///
/// When either labeling has a single cluster its entropy is 0 and the score
/// is defined as 0 (nothing is mutually informative about a constant).
pub fn nmi(a: &[u32], b: &[u32]) -> Result<f64> {
    let table = ContingencyTable::from_labels(a, b)?;
    let n = table.n as f64;
    let (ha, hb) = (entropy(&table.rows, n), entropy(&table.cols, n));
    if ha == 0.0 || hb == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for i in 0..table.rows.len() {
        for j in 0..table.cols.len() {
            let c = table.counts[[i, j]];
            if c > 0 {
                let p = c as f64 / n;
                mi += p * (p / (table.rows[i] as f64 / n * table.cols[j] as f64 / n)).ln();
            }
        }
    }
    Ok((mi / (ha * hb).sqrt()).clamp(0.0, 1.0))
}

/// Minimum-cost perfect assignment on a square cost matrix, returned as
/// `row -> column`. Standard potentials-and-augmenting-paths formulation,
/// cubic in the matrix size.
fn hungarian_min(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    debug_assert_eq!(n, cost.ncols());
    // 1-indexed internally; column 0 is the virtual start of each
    // augmenting path search.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut matched = vec![0usize; n + 1]; // matched[j] = row assigned to column j
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if matched[j] > 0 {
            row_to_col[matched[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Clustering accuracy: the fraction of samples matched under the best
/// one-to-one assignment of predicted clusters to true classes.
///
/// The contingency table is padded to a square with zeros when the two
/// labelings have different numbers of distinct ids; the assignment is found
/// by minimum-cost matching on the negated counts.
pub fn accuracy(pred: &[u32], truth: &[u32]) -> Result<f64> {
    let table = ContingencyTable::from_labels(pred, truth)?;
    let k = table.rows.len().max(table.cols.len());
    let mut cost = Array2::<f64>::zeros((k, k));
    for i in 0..table.rows.len() {
        for j in 0..table.cols.len() {
            cost[[i, j]] = -(table.counts[[i, j]] as f64);
        }
    }
    let assignment = hungarian_min(&cost);
    let matched: f64 = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| -cost[[i, j]])
        .sum();
    Ok(matched / table.n as f64)
}

/// Fraction of test points whose nearest training point (squared Euclidean
/// distance, ties toward the lower index) carries a different label.
pub fn one_nn_error(
    train_x: ArrayView2<'_, f64>,
    train_y: &[u32],
    test_x: ArrayView2<'_, f64>,
    test_y: &[u32],
) -> Result<f64> {
    if train_x.nrows() == 0 {
        return Err(Error::Logic("1-NN needs a non-empty training set".into()));
    }
    if train_x.ncols() != test_x.ncols() {
        return Err(Error::Logic(format!(
            "train dimension {} does not match test dimension {}",
            train_x.ncols(),
            test_x.ncols()
        )));
    }
    if train_y.len() != train_x.nrows() || test_y.len() != test_x.nrows() {
        return Err(Error::Logic(
            "label vectors must match their point sets".into(),
        ));
    }
    if test_x.nrows() == 0 {
        return Ok(0.0);
    }
    let mut errors = 0usize;
    for (t, &label) in test_y.iter().enumerate() {
        let row = test_x.row(t);
        let mut best = (f64::INFINITY, 0usize);
        for i in 0..train_x.nrows() {
            let d = squared_distance(row, train_x.row(i));
            if d < best.0 {
                best = (d, i);
            }
        }
        if train_y[best.1] != label {
            errors += 1;
        }
    }
    Ok(errors as f64 / test_y.len() as f64)
}
