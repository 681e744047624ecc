//! One function per subcommand. Each loads its data, runs the requested
//! pipeline, writes artifacts, re-reads those artifacts to score them, and
//! finishes a [`ReportBuilder`].

use serde_json::{json, Value};

use jule_core::affinity::AffinityMode;
use jule_core::agglomerative::{run_agglomerative, write_merge_trace, MergeStep};
use jule_core::driver::{rerun_final_clustering, run_jule, run_visualization};
use jule_core::metrics::{accuracy, nmi};
use jule_core::Error;

use crate::report::{
    scores_from_artifact, write_assignment_csv, write_features_csv, ReportBuilder,
};
use crate::{AlphaBenchArgs, AppError, ClusterArgs, EvalArgs, JuleArgs, VizArgs};

fn merge_summary(merges: &[MergeStep]) -> Value {
    json!({
        "count": merges.len(),
        "first_loss": merges.first().map(|m| m.loss),
        "last_loss": merges.last().map(|m| m.loss),
    })
}

/// Applies the opt-in unit-norm scaling of `cluster` and `alpha-bench`.
fn maybe_normalize(features: &ndarray::Array2<f64>, normalize: bool) -> ndarray::Array2<f64> {
    if !normalize {
        return features.clone();
    }
    let (xn, zero_rows) = jule_core::dataset::l2_normalize_rows(features);
    if zero_rows > 0 {
        log::warn!("{zero_rows} all-zero sample(s) left unnormalized");
    }
    xn
}

/// `cluster`: one agglomerative run over the raw (L2-normalized) features.
pub fn cmd_cluster(args: &ClusterArgs) -> std::result::Result<Value, AppError> {
    let mode = args.mode.to_mode()?;
    let mut report = ReportBuilder::new("cluster", &args.common.out_dir)?;
    report.config(json!({
        "data": args.common.data,
        "target_nc": args.target_nc,
        "ks": args.graph.ks,
        "a": args.graph.a,
        "kc": args.graph.kc,
        "lambda": args.graph.lambda,
        "mode": mode,
        "normalize": args.normalize,
        "seed": args.common.seed,
    }));

    let dataset = report.time("load", || args.common.load_data())?;
    report.dataset(&dataset);
    let xn = maybe_normalize(&dataset.features, args.normalize);

    let (partition, merges) = report.time("cluster", || {
        run_agglomerative(
            &xn,
            args.graph.ks,
            args.graph.a,
            args.graph.kc,
            args.graph.lambda,
            args.target_nc,
            mode,
        )
    })?;

    let assignment_path = report.artifact("assignment", "assignment.csv");
    let merges_path = report.artifact("merges", "merges.jsonl");
    report.time("write_artifacts", || {
        write_assignment_csv(&assignment_path, &partition.dense_labels())?;
        write_merge_trace(&merges, std::fs::File::create(&merges_path)?)
    })?;

    let (nmi_v, ac_v) = scores_from_artifact(&assignment_path, dataset.labels.as_ref())?;
    report.results(json!({
        "n_clusters": partition.live_count(),
        "merges": merge_summary(&merges),
        "nmi": nmi_v,
        "ac": ac_v,
    }));
    Ok(report.finish()?)
}

/// `jule`: the alternating merge/train loop, with optional re-clustering of
/// the final representation (`--rc`).
pub fn cmd_jule(args: &JuleArgs) -> std::result::Result<Value, AppError> {
    let config = args.to_config()?;
    let mut report = ReportBuilder::new("jule", &args.common.out_dir)?;
    report.config(json!({
        "data": args.common.data,
        "rc": args.rc,
        "run": serde_json::to_value(&config).map_err(|e| Error::Format(e.to_string()))?,
    }));

    let dataset = report.time("load", || args.common.load_data())?;
    report.dataset(&dataset);

    let trace = report.time("jule", || run_jule(&dataset, &config))?;

    let assignment_path = report.artifact("assignment_sf", "assignment.csv");
    let features_path = report.artifact("features", "features.csv");
    let checkpoint_path = report.artifact("checkpoint", "checkpoint.net");
    let trace_path = report.artifact("trace", "trace.json");
    report.time("write_artifacts", || {
        write_assignment_csv(&assignment_path, &trace.final_assignment)?;
        write_features_csv(&features_path, &trace.features)?;
        trace.net.save(&checkpoint_path)?;
        let text = serde_json::to_string_pretty(&trace)
            .map_err(|e| Error::Format(format!("trace serialization failed: {e}")))?;
        std::fs::write(&trace_path, format!("{text}\n"))?;
        Ok(())
    })?;

    let (sf_nmi, sf_ac) = scores_from_artifact(&assignment_path, dataset.labels.as_ref())?;
    let (mut rc_nmi, mut rc_ac) = (None, None);
    if args.rc {
        let rc_partition = report.time("rerun_final_clustering", || {
            rerun_final_clustering(&trace, &dataset, &config)
        })?;
        let rc_path = report.artifact("assignment_rc", "assignment_rc.csv");
        write_assignment_csv(&rc_path, &rc_partition.dense_labels())?;
        (rc_nmi, rc_ac) = scores_from_artifact(&rc_path, dataset.labels.as_ref())?;
    }

    let total_merges: usize = trace.periods.iter().map(|p| p.merges.len()).sum();
    report.results(json!({
        "n_clusters": trace.partition.live_count(),
        "n_periods": trace.periods.len(),
        "total_merges": total_merges,
        "sf_nmi": sf_nmi,
        "sf_ac": sf_ac,
        "rc_nmi": rc_nmi,
        "rc_ac": rc_ac,
    }));
    Ok(report.finish()?)
}

/// `alpha-bench`: exact mode first, then each `--alphas` value, all on the
/// same data and graph settings, with per-setting scores and timings.
pub fn cmd_alpha_bench(args: &AlphaBenchArgs) -> std::result::Result<Value, AppError> {
    let mut report = ReportBuilder::new("alpha-bench", &args.common.out_dir)?;
    report.config(json!({
        "data": args.common.data,
        "target_nc": args.target_nc,
        "ks": args.graph.ks,
        "a": args.graph.a,
        "kc": args.graph.kc,
        "lambda": args.graph.lambda,
        "alphas": args.alphas,
        "normalize": args.normalize,
        "seed": args.common.seed,
    }));

    let dataset = report.time("load", || args.common.load_data())?;
    report.dataset(&dataset);
    let xn = maybe_normalize(&dataset.features, args.normalize);

    let mut settings = vec![("exact".to_string(), AffinityMode::Exact)];
    for &alpha in &args.alphas {
        if !alpha.is_finite() {
            return Err(AppError::Usage(format!(
                "--alphas entries must be finite, got {alpha}"
            )));
        }
        settings.push((
            format!("alpha_{alpha}"),
            AffinityMode::Approximate { alpha },
        ));
    }

    let mut rows = Vec::new();
    for (label, mode) in settings {
        let (partition, _) = report.time(&label, || {
            run_agglomerative(
                &xn,
                args.graph.ks,
                args.graph.a,
                args.graph.kc,
                args.graph.lambda,
                args.target_nc,
                mode,
            )
        })?;
        let path = report.artifact(
            &format!("assignment_{label}"),
            &format!("assignment_{label}.csv"),
        );
        write_assignment_csv(&path, &partition.dense_labels())?;
        let (nmi_v, ac_v) = scores_from_artifact(&path, dataset.labels.as_ref())?;
        let alpha = match mode {
            AffinityMode::Exact => None,
            AffinityMode::Approximate { alpha } => Some(alpha),
        };
        rows.push(json!({
            "mode": label,
            "alpha": alpha,
            "n_clusters": partition.live_count(),
            "nmi": nmi_v,
            "ac": ac_v,
        }));
    }

    report.results(json!({ "rows": rows }));
    Ok(report.finish()?)
}

/// `viz`: the frozen-graph projection variant, writing an `n x out_dim`
/// feature table for plotting.
pub fn cmd_viz(args: &VizArgs) -> std::result::Result<Value, AppError> {
    let config = args.to_config()?;
    let mut report = ReportBuilder::new("viz", &args.common.out_dir)?;
    report.config(json!({
        "data": args.common.data,
        "out_dim": args.out_dim,
        "run": serde_json::to_value(&config).map_err(|e| Error::Format(e.to_string()))?,
    }));

    let dataset = report.time("load", || args.common.load_data())?;
    report.dataset(&dataset);

    let (projection, trace) = report.time("viz", || {
        run_visualization(&dataset, &config, args.out_dim as usize)
    })?;

    let features_path = report.artifact("features", "features.csv");
    let assignment_path = report.artifact("assignment", "assignment.csv");
    report.time("write_artifacts", || {
        write_features_csv(&features_path, &projection)?;
        write_assignment_csv(&assignment_path, &trace.final_assignment)
    })?;

    let written = jule_core::dataset::load_csv(&features_path, None, false)?;
    let (nmi_v, ac_v) = scores_from_artifact(&assignment_path, dataset.labels.as_ref())?;
    report.results(json!({
        "rows": written.n_samples(),
        "out_dim": written.n_features(),
        "n_clusters": trace.partition.live_count(),
        "nmi": nmi_v,
        "ac": ac_v,
    }));
    Ok(report.finish()?)
}

/// `eval`: scores one labeling against another.
pub fn cmd_eval(args: &EvalArgs) -> std::result::Result<Value, AppError> {
    let mut report = ReportBuilder::new("eval", &args.out_dir)?;
    report.config(json!({
        "pred": args.pred.to_string_lossy(),
        "truth": args.truth.to_string_lossy(),
    }));

    let pred = crate::report::read_labels_flexible(&args.pred)?;
    let truth = crate::report::read_labels_flexible(&args.truth)?;
    let scores = report.time("eval", || {
        if pred.len() != truth.len() {
            return Err(Error::Format(format!(
                "label files disagree on sample count: {} vs {}",
                pred.len(),
                truth.len()
            )));
        }
        Ok((nmi(&pred, &truth)?, accuracy(&pred, &truth)?))
    })?;

    report.results(json!({
        "n_samples": pred.len(),
        "nmi": scores.0,
        "ac": scores.1,
    }));
    Ok(report.finish()?)
}
