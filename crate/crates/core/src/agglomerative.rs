//! Greedy agglomerative clustering over the directed affinity graph.
//!
//! Starting from a deliberate over-clustering (connected components of the
//! undirected 1-NN graph), the engine repeatedly picks the cluster whose
//! merge with its nearest neighbour minimizes a local-structure loss, and
//! folds the pair together. The loss looks at a cluster's `Kc` nearest
//! neighbour clusters: the affinity to the first one (how strong the best
//! merge is) plus a weighted measure of how much that first neighbour stands
//! out from the rest. With `lambda = 0` the criterion degrades to plain
//! maximum-affinity merging; positive `lambda` prefers pairs that are
//! isolated from their surroundings, which keeps dense regions from greedily
//! swallowing everything early.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::Write;

use crate::affinity::{AffinityMode, ClusterAffinityCache};
use crate::knn::{sample_affinity, SampleAffinityGraph};
use crate::{Error, Result};

/// A partition of samples into live clusters.
///
/// Cluster ids are stable: merging retires the higher id forever and the
/// surviving cluster keeps the lower one, so a trace of merges can be
/// replayed against the id space of the initial clustering.
#[derive(Debug, Clone)]
pub struct Partition {
    assignment: Vec<u32>,
    members: Vec<Vec<u32>>,
    live: BTreeSet<u32>,
}

impl Partition {
    /// Builds a partition from a per-sample assignment vector. Cluster ids
    /// may be any `u32`s; ids that never occur are treated as dead.
    pub fn from_assignment(assignment: Vec<u32>) -> Result<Self> {
        if assignment.is_empty() {
            return Err(Error::Logic("cannot partition zero samples".into()));
        }
        let max_id = *assignment.iter().max().unwrap() as usize;
        let mut members = vec![Vec::new(); max_id + 1];
        for (s, &c) in assignment.iter().enumerate() {
            members[c as usize].push(s as u32);
        }
        let live = members
            .iter()
            .enumerate()
            .filter(|(_, m)| !m.is_empty())
            .map(|(c, _)| c as u32)
            .collect();
        Ok(Self {
            assignment,
            members,
            live,
        })
    }

    /// Cluster id of each sample.
    pub fn assignment(&self) -> &[u32] {
        &self.assignment
    }

    /// Sorted member list of cluster `c` (empty when dead).
    pub fn members(&self, c: u32) -> &[u32] {
        &self.members[c as usize]
    }

    /// Full member table indexed by cluster id.
    pub fn member_table(&self) -> &[Vec<u32>] {
        &self.members
    }

    /// Live cluster ids in ascending order.
    pub fn live(&self) -> &BTreeSet<u32> {
        &self.live
    }

    /// Number of live clusters.
    pub fn live_count(&self) -> usize {
        self.live.len()
    }

    /// Number of samples.
    pub fn n_samples(&self) -> usize {
        self.assignment.len()
    }

    /// Relabels live clusters densely as `0..live_count` by ascending id,
    /// for artifact export and metric computation.
    pub fn dense_labels(&self) -> Vec<u32> {
        let mut remap = std::collections::HashMap::new();
        for (rank, &c) in self.live.iter().enumerate() {
            remap.insert(c, rank as u32);
        }
        self.assignment.iter().map(|c| remap[c]).collect()
    }

    /// Absorbs cluster `hi` into cluster `lo`, installing the precomputed
    /// union member list.
    fn absorb(&mut self, lo: u32, hi: u32, union: Vec<u32>) {
        let absorbed = std::mem::take(&mut self.members[hi as usize]);
        for &s in &absorbed {
            self.assignment[s as usize] = lo;
        }
        self.members[lo as usize] = union;
        self.live.remove(&hi);
    }

    /// Checks the structural invariants: member lists are sorted, disjoint,
    /// complete, and consistent with the assignment vector.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.assignment.len()];
        for (c, list) in self.members.iter().enumerate() {
            let is_live = self.live.contains(&(c as u32));
            if list.is_empty() != !is_live {
                return Err(Error::Logic(format!(
                    "cluster {c} liveness is inconsistent"
                )));
            }
            if !list.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::Logic(format!(
                    "cluster {c} member list is not sorted"
                )));
            }
            for &s in list {
                if seen[s as usize] {
                    return Err(Error::Logic(format!("sample {s} appears in two clusters")));
                }
                seen[s as usize] = true;
                if self.assignment[s as usize] != c as u32 {
                    return Err(Error::Logic(format!(
                        "sample {s} assigned to {} but listed under {c}",
                        self.assignment[s as usize]
                    )));
                }
            }
        }
        if let Some(s) = seen.iter().position(|&v| !v) {
            return Err(Error::Logic(format!("sample {s} belongs to no cluster")));
        }
        Ok(())
    }
}

/// One executed merge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeStep {
    /// 1-based timestep.
    pub t: usize,
    /// Cluster whose loss won the greedy selection.
    pub winner: u32,
    /// Its nearest neighbour cluster, the other half of the merge.
    pub neighbor: u32,
    /// Loss value of the selected merge.
    pub loss: f64,
    /// Live cluster count after the merge.
    pub clusters_after: usize,
}

/// Writes merge steps as JSON lines (`{"t":..,"winner":..,...}` per line).
pub fn write_merge_trace<W: Write>(steps: &[MergeStep], mut out: W) -> Result<()> {
    for step in steps {
        serde_json::to_writer(&mut out, step)
            .map_err(|e| Error::Logic(format!("trace serialization: {e}")))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Initial over-clustering: connected components of the undirected graph
/// that links every sample to its first nearest neighbour.
///
/// Components are numbered in order of their smallest sample index. The
/// resulting clusters are small (a sample's component rarely extends past a
/// handful of mutual-NN chains), which is the regime the merge loss expects
/// to start from.
pub fn init_clusters(graph: &SampleAffinityGraph) -> Partition {
    let n = graph.n_samples();
    let mut adj: Vec<Vec<u32>> = vec![Vec::new(); n];
    for i in 0..n {
        if let Some(&j) = graph.neighbors(i).first() {
            adj[i].push(j);
            adj[j as usize].push(i as u32);
        }
    }
    let mut assignment = vec![u32::MAX; n];
    let mut next_id = 0u32;
    let mut queue = Vec::new();
    for start in 0..n {
        if assignment[start] != u32::MAX {
            continue;
        }
        queue.push(start as u32);
        assignment[start] = next_id;
        while let Some(v) = queue.pop() {
            for &u in &adj[v as usize] {
                if assignment[u as usize] == u32::MAX {
                    assignment[u as usize] = next_id;
                    queue.push(u);
                }
            }
        }
        next_id += 1;
    }
    Partition::from_assignment(assignment).expect("1-NN components cover every sample")
}

/// Up to `kc` neighbour clusters of `ci`, as `(cluster id, symmetric
/// affinity)` sorted by descending affinity with ties broken toward the
/// lower id.
///
/// Every live cluster counts as a potential neighbour; pairs without graph
/// edges simply sit at affinity 0, so when `ci` has fewer than `kc`
/// positive-affinity neighbours the list is padded with the remaining live
/// ids in ascending order. Fewer than `kc` entries come back only when
/// fewer than `kc` other clusters exist.
pub fn neighbor_clusters(
    cache: &ClusterAffinityCache,
    live: &BTreeSet<u32>,
    ci: u32,
    kc: usize,
) -> Vec<(u32, f64)> {
    let mut positive: Vec<(u32, f64)> = cache
        .connected(ci)
        .iter()
        .map(|&nb| (nb, cache.symmetric(ci, nb)))
        .filter(|&(_, a)| a > 0.0)
        .collect();
    positive.sort_unstable_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    positive.truncate(kc);
    if positive.len() < kc {
        let chosen: BTreeSet<u32> = positive.iter().map(|&(c, _)| c).collect();
        for &c in live {
            if positive.len() == kc {
                break;
            }
            if c != ci && !chosen.contains(&c) {
                positive.push((c, 0.0));
            }
        }
    }
    positive
}

/// Merge loss of cluster `ci` over its neighbour list: the negated affinity
/// to the first neighbour, minus `lambda` times the mean gap between the
/// first neighbour's affinity and the others'. With a single neighbour the
/// gap term is 0; with `m` available neighbours the mean runs over `m - 1`
/// gaps.
pub fn merge_loss(
    cache: &ClusterAffinityCache,
    live: &BTreeSet<u32>,
    ci: u32,
    kc: usize,
    lambda: f64,
) -> Result<f64> {
    let neighbors = neighbor_clusters(cache, live, ci, kc);
    loss_over_neighbors(&neighbors, lambda).ok_or_else(|| {
        Error::Logic(format!(
            "cluster {ci} has no neighbour clusters to merge with"
        ))
    })
}

fn loss_over_neighbors(neighbors: &[(u32, f64)], lambda: f64) -> Option<f64> {
    let (_, a1) = *neighbors.first()?;
    if neighbors.len() == 1 {
        return Some(-a1);
    }
    let gaps: f64 = neighbors[1..].iter().map(|&(_, ak)| a1 - ak).sum();
    Some(-a1 - lambda * gaps / (neighbors.len() - 1) as f64)
}

/// Scans every live cluster and returns `(winner, nearest neighbour, loss)`
/// for the minimal merge loss. Ties break toward the lower winner id (the
/// ascending scan with strict comparison takes care of it) and then the
/// lower neighbour id (handled inside the neighbour ordering).
pub fn select_merge(
    cache: &ClusterAffinityCache,
    live: &BTreeSet<u32>,
    kc: usize,
    lambda: f64,
) -> Result<(u32, u32, f64)> {
    if live.len() < 2 {
        return Err(Error::Logic(
            "need at least two live clusters to merge".into(),
        ));
    }
    let mut best: Option<(f64, u32, u32)> = None;
    for &ci in live {
        let neighbors = neighbor_clusters(cache, live, ci, kc);
        let loss = loss_over_neighbors(&neighbors, lambda)
            .expect("live_count >= 2 guarantees a neighbour");
        if best.is_none_or(|(bl, _, _)| loss < bl) {
            best = Some((loss, ci, neighbors[0].0));
        }
    }
    let (loss, winner, neighbor) = best.unwrap();
    Ok((winner, neighbor, loss))
}

#[derive(Debug, Clone, Copy)]
struct Choice {
    loss: f64,
    nn1: u32,
}

/// Incremental agglomerative merge engine.
///
/// Holds the partition, the affinity cache, and a per-cluster memo of
/// `(loss, nearest neighbour)` that is invalidated only for clusters whose
/// affinity row a merge actually touched. Selections are identical to the
/// full rescan of [`select_merge`]; only the bookkeeping is lazier.
pub struct AgglomerativeEngine<'g> {
    graph: &'g SampleAffinityGraph,
    partition: Partition,
    cache: ClusterAffinityCache,
    kc: usize,
    lambda: f64,
    t: usize,
    choices: Vec<Option<Choice>>,
}

impl<'g> AgglomerativeEngine<'g> {
    /// Builds the engine for an existing partition over `graph`.
    pub fn new(
        graph: &'g SampleAffinityGraph,
        partition: Partition,
        mode: AffinityMode,
        kc: usize,
        lambda: f64,
    ) -> Result<Self> {
        if kc < 1 {
            return Err(Error::Config("kc must be at least 1".into()));
        }
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::Config(format!(
                "lambda must be finite and non-negative, got {lambda}"
            )));
        }
        if partition.n_samples() != graph.n_samples() {
            return Err(Error::Logic(format!(
                "partition covers {} samples but the graph has {}",
                partition.n_samples(),
                graph.n_samples()
            )));
        }
        let cache = ClusterAffinityCache::build(
            graph,
            partition.assignment(),
            partition.member_table(),
            mode,
        )?;
        let choices = vec![None; partition.member_table().len()];
        Ok(Self {
            graph,
            partition,
            cache,
            kc,
            lambda,
            t: 0,
            choices,
        })
    }

    /// Current partition.
    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    /// Current affinity cache.
    pub fn cache(&self) -> &ClusterAffinityCache {
        &self.cache
    }

    /// Timesteps executed so far.
    pub fn timestep(&self) -> usize {
        self.t
    }

    /// Consumes the engine, returning the partition.
    pub fn into_partition(self) -> Partition {
        self.partition
    }

    fn refresh_choices(&mut self) {
        let live: Vec<u32> = self.partition.live().iter().copied().collect();
        for &ci in &live {
            if self.choices[ci as usize].is_none() {
                let neighbors = neighbor_clusters(&self.cache, self.partition.live(), ci, self.kc);
                let loss = loss_over_neighbors(&neighbors, self.lambda)
                    .expect("at least two live clusters while stepping");
                self.choices[ci as usize] = Some(Choice {
                    loss,
                    nn1: neighbors[0].0,
                });
            }
        }
    }

    /// Executes one greedy merge and returns its record.
    pub fn step(&mut self) -> Result<MergeStep> {
        if self.partition.live_count() < 2 {
            return Err(Error::Logic(
                "need at least two live clusters to merge".into(),
            ));
        }
        self.refresh_choices();
        let mut best: Option<(f64, u32, u32)> = None;
        for &ci in self.partition.live() {
            let Choice { loss, nn1 } = self.choices[ci as usize].expect("refreshed above");
            if best.is_none_or(|(bl, _, _)| loss < bl) {
                best = Some((loss, ci, nn1));
            }
        }
        let (loss, winner, neighbor) = best.unwrap();
        let (lo, hi) = (winner.min(neighbor), winner.max(neighbor));

        // Invalidate every cluster whose affinity row this merge touches:
        // anything edge-connected to either half, the survivor itself, and
        // clusters whose memoized nearest neighbour is the dying id.
        let mut dirty: BTreeSet<u32> = self.cache.connected(lo) | self.cache.connected(hi);
        dirty.insert(lo);
        for &ci in self.partition.live() {
            if let Some(Choice { nn1, .. }) = self.choices[ci as usize] {
                if nn1 == hi {
                    dirty.insert(ci);
                }
            }
        }

        let union = self
            .cache
            .merge_update(self.graph, self.partition.member_table(), lo, hi);
        self.partition.absorb(lo, hi, union);
        self.choices[hi as usize] = None;

        if self.partition.live_count() <= self.kc {
            // The neighbour list length is capped by the live count now, so
            // every loss normalizer changes from here on.
            for c in &mut self.choices {
                *c = None;
            }
        } else {
            for ci in dirty {
                self.choices[ci as usize] = None;
            }
        }

        self.t += 1;
        Ok(MergeStep {
            t: self.t,
            winner,
            neighbor,
            loss,
            clusters_after: self.partition.live_count(),
        })
    }

    /// Runs merges until `target_nc` live clusters remain.
    pub fn run_until(&mut self, target_nc: usize) -> Result<Vec<MergeStep>> {
        if target_nc < 1 {
            return Err(Error::Config(
                "target cluster count must be at least 1".into(),
            ));
        }
        if target_nc > self.partition.live_count() {
            return Err(Error::Config(format!(
                "target cluster count {target_nc} exceeds current live count {}",
                self.partition.live_count()
            )));
        }
        let mut steps = Vec::with_capacity(self.partition.live_count() - target_nc);
        while self.partition.live_count() > target_nc {
            steps.push(self.step()?);
        }
        Ok(steps)
    }
}

/// Convenience pipeline: affinity graph, 1-NN initialization, and merges
/// down to `target_nc` clusters on raw features.
pub fn run_agglomerative(
    x: &ndarray::Array2<f64>,
    ks: usize,
    a: f64,
    kc: usize,
    lambda: f64,
    target_nc: usize,
    mode: AffinityMode,
) -> Result<(Partition, Vec<MergeStep>)> {
    let graph = sample_affinity(x, ks, a)?;
    let partition = init_clusters(&graph);
    if target_nc > partition.live_count() {
        return Err(Error::Config(format!(
            "target cluster count {target_nc} exceeds the {} initial clusters",
            partition.live_count()
        )));
    }
    let mut engine = AgglomerativeEngine::new(&graph, partition, mode, kc, lambda)?;
    let steps = engine.run_until(target_nc)?;
    Ok((engine.into_partition(), steps))
}
