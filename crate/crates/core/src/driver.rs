//! The alternating optimization loop: agglomerative merging interleaved
//! with embedder training.
//!
//! A run is partially unrolled into *periods*. Each period first performs
//! `n_p = ceil(eta * n_c)` merges on the current affinity graph (`n_c` being
//! the cluster count when the period starts, truncated so the run never
//! drops below the target), then trains the embedding network against the
//! clusters just formed, re-embeds every sample, and rebuilds the graph and
//! cluster affinities on the new representation. Small `eta` retrains often
//! on conservative partitions; `eta = 1` degenerates to a single merge pass
//! followed by one round of training.
//!
//! Besides the plain run ([`run_jule`], whose partition is the "straight
//! forward" labeling), the module provides a re-clustering pass on the final
//! representation ([`rerun_final_clustering`]) and a low-dimensional
//! visualization mode ([`run_visualization`]) that keeps the raw-input graph
//! frozen and trains an un-normalized projection head instead.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::affinity::AffinityMode;
use crate::agglomerative::{init_clusters, AgglomerativeEngine, MergeStep, Partition};
use crate::dataset::{l2_normalize_rows, Dataset};
use crate::embedding::{
    init_net, train_epochs, train_period, EmbeddingNet, OptimizerState, SolverParams, TrainOptions,
};
use crate::knn::sample_affinity;
use crate::metrics::{accuracy, nmi};
use crate::{Error, Result};

/// Configuration for an alternating run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JuleConfig {
    /// Neighbours per sample in the affinity graph.
    pub ks: usize,
    /// Bandwidth scale of the graph's Gaussian kernel.
    pub a: f64,
    /// Neighbour clusters considered by the merge loss and by negative
    /// mining.
    pub kc: usize,
    /// Weight of the separation term in the merge loss.
    pub lambda: f64,
    /// Positive-pair weight in the triplet hinge.
    pub gamma: f64,
    /// Triplet hinge margin.
    pub margin: f64,
    /// Unrolling rate: fraction of live clusters merged per period.
    pub eta: f64,
    /// Cluster count to stop at.
    pub target_nc: usize,
    /// Training epochs per period.
    pub epochs_per_period: usize,
    /// Training batch size.
    pub batch_size: usize,
    /// Widths of the embedder layers after the input layer (the input width
    /// comes from the data).
    pub embed_dims: Vec<usize>,
    /// Seed for initialization, shuffling, and triplet draws.
    pub seed: u64,
    /// Cluster-affinity bookkeeping mode.
    pub affinity_mode: AffinityMode,
    /// Whether a final training pass follows the last merge period, so the
    /// returned network has seen the returned partition.
    pub final_training_pass: bool,
    /// Momentum-SGD hyperparameters.
    pub solver: SolverParams,
}

impl JuleConfig {
    /// Defaults for a run down to `target_nc` clusters.
    pub fn new(target_nc: usize) -> Self {
        Self {
            ks: 20,
            a: 1.0,
            kc: 5,
            lambda: 1.0,
            gamma: 2.0,
            margin: 0.2,
            eta: 0.9,
            target_nc,
            epochs_per_period: 20,
            batch_size: 128,
            embed_dims: vec![160],
            seed: 0,
            affinity_mode: AffinityMode::Exact,
            final_training_pass: true,
            solver: SolverParams::default(),
        }
    }

    /// Checks field ranges.
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::Config(format!(
                "eta must lie in (0, 1], got {}",
                self.eta
            )));
        }
        if self.target_nc < 1 {
            return Err(Error::Config(
                "target cluster count must be at least 1".into(),
            ));
        }
        if self.ks < 1 || self.kc < 1 || self.epochs_per_period < 1 || self.batch_size < 1 {
            return Err(Error::Config(
                "ks, kc, epochs_per_period, and batch_size must be positive".into(),
            ));
        }
        if self.embed_dims.is_empty() || self.embed_dims.contains(&0) {
            return Err(Error::Config(format!(
                "embedder widths must be non-empty and positive, got {:?}",
                self.embed_dims
            )));
        }
        for (name, v) in [
            ("a", self.a),
            ("lambda", self.lambda),
            ("gamma", self.gamma),
            ("margin", self.margin),
        ] {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite, got {v}")));
            }
        }
        Ok(())
    }
}

/// Merge lengths of successive periods: `ceil(eta * n_c)` at each period's
/// starting cluster count, truncated so the total lands exactly on
/// `target_nc`.
pub fn period_schedule(initial_nc: usize, eta: f64, target_nc: usize) -> Vec<usize> {
    let mut lengths = Vec::new();
    let mut live = initial_nc;
    while live > target_nc {
        let n_p = ((eta * live as f64).ceil() as usize).clamp(1, live - target_nc);
        lengths.push(n_p);
        live -= n_p;
    }
    lengths
}

/// What one period did: its merges, the training curve that followed, and
/// optional agreement with ground-truth labels.
#[derive(Debug, Clone, Serialize)]
pub struct PeriodRecord {
    /// Period index, starting at 0.
    pub period: usize,
    /// First global timestep of the period (timesteps count merges from 1).
    pub t_start: usize,
    /// Last global timestep of the period.
    pub t_end: usize,
    /// The merges, renumbered to global timesteps.
    pub merges: Vec<MergeStep>,
    /// Live clusters once the period's merges finished.
    pub clusters_after: usize,
    /// Mean triplet loss per training epoch (empty when the period did not
    /// train).
    pub epoch_losses: Vec<f64>,
    /// Clustering agreement with ground truth, when labels exist.
    pub nmi: Option<f64>,
    /// Best-map accuracy against ground truth, when labels exist.
    pub ac: Option<f64>,
}

/// Everything a run produced. The JSON form carries the period records and
/// final labeling; bulky artifacts (features, network) ride along in memory
/// and are persisted through their own formats.
#[derive(Debug, Serialize)]
pub struct RunTrace {
    /// Per-period records; spans tile `1..=total_merges` without gaps.
    pub periods: Vec<PeriodRecord>,
    /// Final labeling, renumbered to `0..k`.
    pub final_assignment: Vec<u32>,
    /// Whether the network was trained after the last merge period.
    pub final_training_pass: bool,
    /// Final partition (cluster ids as the merge engine left them).
    #[serde(skip)]
    pub partition: Partition,
    /// Final embedded features, one row per sample.
    #[serde(skip)]
    pub features: Array2<f64>,
    /// The trained network.
    #[serde(skip)]
    pub net: EmbeddingNet,
}

fn agreement(partition: &Partition, labels: Option<&Vec<u32>>) -> (Option<f64>, Option<f64>) {
    match labels {
        Some(truth) => {
            let pred = partition.dense_labels();
            (nmi(&pred, truth).ok(), accuracy(&pred, truth).ok())
        }
        None => (None, None),
    }
}

/// Runs the full alternating loop and returns its trace. The trace's
/// partition is the run's direct output labeling; see
/// [`rerun_final_clustering`] for the re-clustering variant.
pub fn run_jule(dataset: &Dataset, config: &JuleConfig) -> Result<RunTrace> {
    config.validate()?;
    if dataset.n_samples() == 0 {
        return Err(Error::Config("dataset is empty".into()));
    }
    let (xn, zero_rows) = l2_normalize_rows(&dataset.features);
    if zero_rows > 0 {
        log::warn!("{zero_rows} all-zero sample(s) left unnormalized");
    }
    let mut dims = vec![xn.ncols()];
    dims.extend_from_slice(&config.embed_dims);
    let mut net = init_net(&dims, config.seed)?;
    let mut opt = OptimizerState::new(&net, config.solver);

    let mut graph = sample_affinity(&xn, config.ks, config.a)?;
    let mut partition = init_clusters(&graph);
    if config.target_nc > partition.live_count() {
        return Err(Error::Config(format!(
            "target cluster count {} exceeds the {} initial clusters",
            config.target_nc,
            partition.live_count()
        )));
    }
    log::info!(
        "run start: {} samples, {} initial clusters, target {}",
        xn.nrows(),
        partition.live_count(),
        config.target_nc
    );

    let train_opts = TrainOptions {
        epochs: config.epochs_per_period,
        batch_size: config.batch_size,
        gamma: config.gamma,
        margin: config.margin,
        kc: config.kc,
        per_anchor: config.kc,
        seed: config.seed,
    };
    let mut features = xn.clone();
    let mut periods = Vec::new();
    let mut t_next = 1usize;
    while partition.live_count() > config.target_nc {
        let period = periods.len();
        let live = partition.live_count();
        let n_p = ((config.eta * live as f64).ceil() as usize).clamp(1, live - config.target_nc);
        let mut engine = AgglomerativeEngine::new(
            &graph,
            partition,
            config.affinity_mode,
            config.kc,
            config.lambda,
        )?;
        let mut merges = engine.run_until(live - n_p)?;
        partition = engine.into_partition();
        for (offset, step) in merges.iter_mut().enumerate() {
            step.t = t_next + offset;
        }
        let t_start = t_next;
        t_next += merges.len();

        let at_target = partition.live_count() == config.target_nc;
        let epoch_losses = if !at_target || config.final_training_pass {
            opt.reset();
            let outcome = train_period(
                &mut net,
                &mut opt,
                &xn,
                &partition,
                &graph,
                &train_opts,
                config.ks,
                config.a,
            )?;
            features = outcome.features;
            graph = outcome.graph;
            outcome.epoch_losses
        } else {
            Vec::new()
        };

        let (nmi_now, ac_now) = agreement(&partition, dataset.labels.as_ref());
        log::info!(
            "period {period}: {} merges -> {} clusters, last loss {:.4}{}",
            n_p,
            partition.live_count(),
            epoch_losses.last().copied().unwrap_or(f64::NAN),
            nmi_now.map_or(String::new(), |v| format!(", nmi {v:.4}")),
        );
        periods.push(PeriodRecord {
            period,
            t_start,
            t_end: t_next - 1,
            merges,
            clusters_after: partition.live_count(),
            epoch_losses,
            nmi: nmi_now,
            ac: ac_now,
        });
    }

    Ok(RunTrace {
        periods,
        final_assignment: partition.dense_labels(),
        final_training_pass: config.final_training_pass,
        partition,
        features,
        net,
    })
}

/// Re-clusters from scratch on the final representation: embeds every
/// sample with the trace's network, rebuilds the graph, and merges from a
/// fresh initialization down to the target. Reads nothing from the trace
/// but the network.
pub fn rerun_final_clustering(
    trace: &RunTrace,
    dataset: &Dataset,
    config: &JuleConfig,
) -> Result<Partition> {
    config.validate()?;
    let (xn, _) = l2_normalize_rows(&dataset.features);
    let embedded = trace.net.embed_all(&xn)?;
    let graph = sample_affinity(&embedded, config.ks, config.a)?;
    let partition = init_clusters(&graph);
    if config.target_nc > partition.live_count() {
        return Err(Error::Config(format!(
            "target cluster count {} exceeds the {} fresh clusters",
            config.target_nc,
            partition.live_count()
        )));
    }
    let mut engine = AgglomerativeEngine::new(
        &graph,
        partition,
        config.affinity_mode,
        config.kc,
        config.lambda,
    )?;
    engine.run_until(config.target_nc)?;
    Ok(engine.into_partition())
}

/// The visualization variant: the raw-input affinity graph is frozen for
/// both merging and triplet mining, and the network is a projection head —
/// no output normalization, with an extra affine layer of width `out_dim`
/// on top of the configured stack. Returns the `n_s x out_dim` projection
/// of every sample alongside the trace.
pub fn run_visualization(
    dataset: &Dataset,
    config: &JuleConfig,
    out_dim: usize,
) -> Result<(Array2<f64>, RunTrace)> {
    config.validate()?;
    if out_dim == 0 {
        return Err(Error::Config("projection width must be positive".into()));
    }
    if dataset.n_samples() == 0 {
        return Err(Error::Config("dataset is empty".into()));
    }
    let (xn, zero_rows) = l2_normalize_rows(&dataset.features);
    if zero_rows > 0 {
        log::warn!("{zero_rows} all-zero sample(s) left unnormalized");
    }
    let mut dims = vec![xn.ncols()];
    dims.extend_from_slice(&config.embed_dims);
    dims.push(out_dim);
    let mut net = EmbeddingNet::init(&dims, false, config.seed)?;
    let mut opt = OptimizerState::new(&net, config.solver);

    let graph = sample_affinity(&xn, config.ks, config.a)?;
    let mut partition = init_clusters(&graph);
    if config.target_nc > partition.live_count() {
        return Err(Error::Config(format!(
            "target cluster count {} exceeds the {} initial clusters",
            config.target_nc,
            partition.live_count()
        )));
    }

    let train_opts = TrainOptions {
        epochs: config.epochs_per_period,
        batch_size: config.batch_size,
        gamma: config.gamma,
        margin: config.margin,
        kc: config.kc,
        per_anchor: config.kc,
        seed: config.seed,
    };
    let mut periods = Vec::new();
    let mut t_next = 1usize;
    while partition.live_count() > config.target_nc {
        let period = periods.len();
        let live = partition.live_count();
        let n_p = ((config.eta * live as f64).ceil() as usize).clamp(1, live - config.target_nc);
        let mut engine = AgglomerativeEngine::new(
            &graph,
            partition,
            config.affinity_mode,
            config.kc,
            config.lambda,
        )?;
        let mut merges = engine.run_until(live - n_p)?;
        partition = engine.into_partition();
        for (offset, step) in merges.iter_mut().enumerate() {
            step.t = t_next + offset;
        }
        let t_start = t_next;
        t_next += merges.len();

        let at_target = partition.live_count() == config.target_nc;
        let epoch_losses = if !at_target || config.final_training_pass {
            opt.reset();
            train_epochs(&mut net, &mut opt, &xn, &partition, &graph, &train_opts)?
        } else {
            Vec::new()
        };

        let (nmi_now, ac_now) = agreement(&partition, dataset.labels.as_ref());
        periods.push(PeriodRecord {
            period,
            t_start,
            t_end: t_next - 1,
            merges,
            clusters_after: partition.live_count(),
            epoch_losses,
            nmi: nmi_now,
            ac: ac_now,
        });
    }

    let features = net.embed_all(&xn)?;
    let trace = RunTrace {
        periods,
        final_assignment: partition.dense_labels(),
        final_training_pass: config.final_training_pass,
        partition,
        features: features.clone(),
        net,
    };
    Ok((features, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agglomerative::run_agglomerative;
    use crate::dataset::make_blobs;

    #[test]
    fn schedule_matches_direct_simulation() {
        // ceil(0.2 * n_c) from 100 down to 10, truncating the final period.
        assert_eq!(
            period_schedule(100, 0.2, 10),
            vec![20, 16, 13, 11, 8, 7, 5, 4, 4, 2]
        );
        assert_eq!(period_schedule(100, 0.2, 10).iter().sum::<usize>(), 90);
        // eta = 1 merges everything in one period.
        assert_eq!(period_schedule(57, 1.0, 9), vec![48]);
        // Already at the target: nothing to do.
        assert!(period_schedule(10, 0.5, 10).is_empty());
        // ceil keeps periods moving even when eta * n_c < 1.
        assert_eq!(period_schedule(4, 0.1, 1), vec![1, 1, 1]);
    }

    fn quick_config(target_nc: usize, eta: f64, seed: u64) -> JuleConfig {
        JuleConfig {
            ks: 8,
            eta,
            seed,
            epochs_per_period: 4,
            batch_size: 64,
            embed_dims: vec![16],
            ..JuleConfig::new(target_nc)
        }
    }

    #[test]
    fn config_validation_rejects_bad_ranges() {
        for eta in [0.0, -0.5, 1.5] {
            assert!(matches!(
                quick_config(3, eta, 0).validate(),
                Err(Error::Config(_))
            ));
        }
        let mut c = quick_config(3, 0.9, 0);
        c.target_nc = 0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = quick_config(3, 0.9, 0);
        c.embed_dims = vec![];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        assert!(quick_config(3, 0.9, 0).validate().is_ok());
    }

    #[test]
    fn unit_eta_is_one_merge_pass_plus_one_training_pass() {
        let ds = make_blobs(3, 25, 4, 0.8, 3.0, 5).unwrap();
        let trace = run_jule(&ds, &quick_config(3, 1.0, 1)).unwrap();
        assert_eq!(trace.periods.len(), 1);
        assert_eq!(trace.periods[0].epoch_losses.len(), 4);
        assert_eq!(trace.periods[0].clusters_after, 3);
        assert_eq!(trace.partition.live_count(), 3);
    }

    #[test]
    fn period_spans_tile_the_timestep_axis() {
        let ds = make_blobs(4, 30, 5, 1.0, 3.0, 17).unwrap();
        let trace = run_jule(&ds, &quick_config(4, 0.3, 2)).unwrap();
        assert!(trace.periods.len() > 1);
        let mut expected_t = 1;
        let mut prev_clusters = usize::MAX;
        for (i, p) in trace.periods.iter().enumerate() {
            assert_eq!(p.period, i);
            assert_eq!(p.t_start, expected_t);
            assert_eq!(p.merges.len(), p.t_end - p.t_start + 1);
            for (j, m) in p.merges.iter().enumerate() {
                assert_eq!(m.t, p.t_start + j);
            }
            assert!(p.clusters_after < prev_clusters);
            assert!(p.clusters_after >= 4);
            prev_clusters = p.clusters_after;
            expected_t = p.t_end + 1;
        }
        let total: usize = trace.periods.iter().map(|p| p.merges.len()).sum();
        let initial = trace.periods[0].clusters_after + trace.periods[0].merges.len();
        assert_eq!(total, initial - 4);
        // Ground-truth agreement is recorded when labels exist.
        assert!(trace
            .periods
            .iter()
            .all(|p| p.nmi.is_some() && p.ac.is_some()));
    }

    #[test]
    fn runs_are_deterministic() {
        let ds = make_blobs(3, 20, 4, 0.9, 3.0, 23).unwrap();
        let cfg = quick_config(3, 0.4, 7);
        let a = run_jule(&ds, &cfg).unwrap();
        let b = run_jule(&ds, &cfg).unwrap();
        assert_eq!(a.final_assignment, b.final_assignment);
        assert_eq!(a.features, b.features);
        assert_eq!(a.net.layers(), b.net.layers());
        assert_eq!(
            serde_json::to_string(&a.periods).unwrap(),
            serde_json::to_string(&b.periods).unwrap()
        );
    }

    #[test]
    fn skipping_the_final_training_pass_leaves_earlier_periods_alone() {
        let ds = make_blobs(3, 20, 4, 0.9, 3.0, 23).unwrap();
        let mut cfg = quick_config(3, 0.4, 7);
        cfg.final_training_pass = false;
        let trace = run_jule(&ds, &cfg).unwrap();
        assert!(trace.periods.last().unwrap().epoch_losses.is_empty());
        assert!(trace.periods[..trace.periods.len() - 1]
            .iter()
            .all(|p| !p.epoch_losses.is_empty()));
        assert!(!trace.final_training_pass);
    }

    #[test]
    fn reclustering_saturates_with_clean_blobs() {
        let ds = make_blobs(3, 25, 4, 0.4, 4.0, 3).unwrap();
        let cfg = quick_config(3, 0.9, 1);
        let trace = run_jule(&ds, &cfg).unwrap();
        let rc = rerun_final_clustering(&trace, &ds, &cfg).unwrap();
        let truth = ds.labels.as_ref().unwrap();
        let sf_nmi = nmi(&trace.final_assignment, truth).unwrap();
        let rc_nmi = nmi(&rc.dense_labels(), truth).unwrap();
        assert_eq!(sf_nmi, 1.0);
        assert_eq!(rc_nmi, 1.0);
    }

    #[test]
    fn reclustering_reads_only_the_final_network() {
        let ds = make_blobs(3, 20, 4, 0.9, 3.0, 23).unwrap();
        let cfg = quick_config(3, 0.4, 7);
        let mut trace = run_jule(&ds, &cfg).unwrap();
        let full = rerun_final_clustering(&trace, &ds, &cfg).unwrap();
        trace.periods.clear();
        trace.final_assignment.clear();
        trace.features = Array2::zeros((0, 0));
        let stripped = rerun_final_clustering(&trace, &ds, &cfg).unwrap();
        assert_eq!(full.assignment(), stripped.assignment());
    }

    #[test]
    fn frozen_graph_reproduces_plain_agglomerative_merges() {
        let ds = make_blobs(3, 30, 4, 1.0, 3.0, 11).unwrap();
        let cfg = quick_config(3, 0.3, 5);
        let (features, trace) = run_visualization(&ds, &cfg, 2).unwrap();
        assert_eq!(features.dim(), (90, 2));
        // The projection head is not normalized.
        assert!(features
            .rows()
            .into_iter()
            .any(|r| (r.dot(&r).sqrt() - 1.0).abs() > 1e-6));

        let (xn, _) = l2_normalize_rows(&ds.features);
        let (plain, steps) =
            run_agglomerative(&xn, cfg.ks, cfg.a, cfg.kc, cfg.lambda, 3, cfg.affinity_mode)
                .unwrap();
        let viz_steps: Vec<_> = trace.periods.iter().flat_map(|p| p.merges.iter()).collect();
        assert_eq!(viz_steps.len(), steps.len());
        for (a, b) in viz_steps.iter().zip(&steps) {
            assert_eq!((a.winner, a.neighbor), (b.winner, b.neighbor));
        }
        assert_eq!(trace.partition.assignment(), plain.assignment());
    }
}
