use std::fmt::Write as _;

use inrpack::store::CompressionReport;
use inrpack::trainer::PipelineRun;
use inrpack::EncodedModel;

/// Per-leaf residuals, split events and compression ratio of an encode run.
pub fn run_report(run: &PipelineRun, cr: &CompressionReport, seconds: f64) -> String {
    let mut s = String::new();
    let model = &run.model;
    let _ = writeln!(s, "top-level clusters: {}", model.partition.roots.len());
    let _ = writeln!(s, "leaves: {}", run.jobs.len());
    let _ = writeln!(s, "splits: {}", run.split_events.len());
    let _ = writeln!(s, "parameters: {}", model.total_params());
    let _ = writeln!(s, "compression ratio: {cr}");
    let _ = writeln!(s, "elapsed: {seconds:.1}s");
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{:<12} {:>8} {:>7} {:>13} {:>13}  {:<20} per-variable MSE",
        "leaf", "points", "epochs", "best loss", "residual", "termination"
    );
    for job in &run.jobs {
        let per_var: Vec<String> = job.stats.per_variable_mse.iter().map(|v| format!("{v:.4e}")).collect();
        let _ = writeln!(
            s,
            "{:<12} {:>8} {:>7} {:>13.4e} {:>13.4e}  {:<20} {}",
            job.leaf_id.to_string(),
            job.stats.point_count,
            job.epochs_run,
            job.best_loss,
            job.residual(),
            job.termination.to_string(),
            per_var.join(" ")
        );
    }
    if !run.split_events.is_empty() {
        let _ = writeln!(s);
        let _ = writeln!(s, "split events:");
        for e in &run.split_events {
            let _ = writeln!(
                s,
                "  {} (residual {:.4e}) -> {} [{} points], {} [{} points]",
                e.parent, e.parent_residual, e.children[0], e.child_points[0], e.children[1], e.child_points[1]
            );
        }
    }
    if run.meta_traces.iter().any(|t| !t.is_empty()) {
        let _ = writeln!(s);
        let _ = writeln!(s, "meta-training final query loss:");
        for (i, trace) in run.meta_traces.iter().enumerate() {
            if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
                let _ = writeln!(s, "  cluster {i}: {first:.4e} -> {last:.4e} over {} iterations", trace.len());
            }
        }
    }
    s
}

/// `key = value` run summary written next to the model.
pub fn run_summary(run: &PipelineRun, cr: &CompressionReport, seconds: f64) -> String {
    let mut s = String::new();
    let model = &run.model;
    let _ = writeln!(s, "top_level_clusters = {}", model.partition.roots.len());
    let _ = writeln!(s, "leaves = {}", run.jobs.len());
    let _ = writeln!(s, "splits = {}", run.split_events.len());
    let _ = writeln!(s, "parameters = {}", model.total_params());
    let _ = writeln!(s, "raw_bytes = {}", cr.raw_bytes);
    let _ = writeln!(s, "model_bytes = {}", cr.model_bytes);
    let _ = writeln!(s, "compression_ratio = {:.2}", cr.ratio);
    let _ = writeln!(s, "elapsed_seconds = {seconds:.3}");
    for job in &run.jobs {
        let key = format!("leaf.{}", job.leaf_id);
        let _ = writeln!(s, "{key}.points = {}", job.stats.point_count);
        let _ = writeln!(s, "{key}.epochs_run = {}", job.epochs_run);
        let _ = writeln!(s, "{key}.best_loss = {:e}", job.best_loss);
        let _ = writeln!(s, "{key}.residual = {:e}", job.residual());
        for (m, v) in job.stats.per_variable_mse.iter().enumerate() {
            let _ = writeln!(s, "{key}.residual.{m} = {v:e}");
        }
        let _ = writeln!(s, "{key}.termination = {}", job.termination);
    }
    for (i, e) in run.split_events.iter().enumerate() {
        let _ = writeln!(
            s,
            "split.{i} = {} {:e} -> {}:{} {}:{}",
            e.parent, e.parent_residual, e.children[0], e.child_points[0], e.children[1], e.child_points[1]
        );
    }
    s
}

/// Human-readable summary of a stored model.
pub fn inspect(model: &EncodedModel, file_size: u64) -> String {
    let mut s = String::new();
    let net = &model.network;
    let fp = &model.fingerprint;
    let partition_leaves = model.partition.leaves().len();
    let _ = writeln!(s, "format version: {}", model.version);
    let _ = writeln!(s, "file size: {file_size} bytes");
    let _ = writeln!(s, "dataset: {fp}");
    let _ = writeln!(s, "K (top-level clusters): {}", model.partition.roots.len());
    let _ = writeln!(s, "leaf count: {partition_leaves}");
    let _ = writeln!(s, "network count: {}", model.leaves.len());
    let _ = writeln!(s, "leaves match networks: {}", partition_leaves == model.leaves.len());
    let _ = writeln!(s, "max split depth: {}", model.partition.max_split_depth);
    let depths: Vec<String> = model.partition.tree_depths().iter().map(|d| d.to_string()).collect();
    let _ = writeln!(s, "split tree depths: {}", depths.join(" "));
    let _ = writeln!(
        s,
        "network: width {} frequencies {} gfe {} lfe {} heads {:?} variables {}",
        net.width, net.pe.num_frequencies, net.gfe_blocks, net.lfe_blocks, net.head_mode, net.num_variables
    );
    let _ = writeln!(s, "parameters per network: {}", net.param_count());
    let _ = writeln!(s, "parameters total: {}", model.total_params());
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<12} {:>8} {:>13}", "leaf", "points", "residual");
    for leaf in &model.leaves {
        let _ = writeln!(
            s,
            "{:<12} {:>8} {:>13.4e}",
            leaf.leaf_id.to_string(),
            leaf.stats.point_count,
            leaf.stats.aggregate_mse
        );
    }
    s
}
