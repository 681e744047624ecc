//! Minimal end-to-end tour: cluster a synthetic mixture with the plain
//! agglomerative engine, then run the joint clustering/embedding loop and
//! compare both against the ground truth.
//!
//! ```text
//! cargo run --release --example quickstart
//! ```

use jule_core::affinity::AffinityMode;
use jule_core::agglomerative::run_agglomerative;
use jule_core::dataset::{l2_normalize_rows, make_blobs};
use jule_core::driver::{run_jule, JuleConfig};
use jule_core::metrics::{accuracy, nmi};

fn main() -> jule_core::Result<()> {
    // Five overlapping Gaussian blobs in 10 dimensions, 100 samples each.
    let dataset = make_blobs(5, 100, 10, 0.9, 3.0, 0)?;
    let truth = dataset.labels.clone().expect("synthetic data is labeled");

    // Baseline: agglomerative clustering on the unit-normalized raw features.
    let (xn, _) = l2_normalize_rows(&dataset.features);
    let (partition, merges) = run_agglomerative(&xn, 20, 1.0, 5, 1.0, 5, AffinityMode::Exact)?;
    println!(
        "agglomerative baseline: {} merges, NMI {:.4}, AC {:.4}",
        merges.len(),
        nmi(&partition.dense_labels(), &truth)?,
        accuracy(&partition.dense_labels(), &truth)?
    );

    // Joint loop: alternate merging with training a small embedding network
    // on merge-derived triplets, re-deriving the affinity graph each period.
    let mut config = JuleConfig {
        ks: 20,
        eta: 0.9,
        epochs_per_period: 20,
        seed: 0,
        ..JuleConfig::new(5)
    };
    config.solver.base_lr = 0.01;
    let trace = run_jule(&dataset, &config)?;
    println!(
        "joint loop: {} periods, NMI {:.4}, AC {:.4}",
        trace.periods.len(),
        nmi(&trace.final_assignment, &truth)?,
        accuracy(&trace.final_assignment, &truth)?
    );
    Ok(())
}
