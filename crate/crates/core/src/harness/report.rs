//! Post-hoc tables over a finished run directory.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::config::TrainConfig;
use super::train::{CHECKPOINT_DIR, CONFIG_FILE, FINAL_CHECKPOINT, INITIAL_CHECKPOINT, MAPS_DIR, METRICS_FILE, PRUNE_LOG_FILE};
use super::HarnessError;
use crate::clusterlab::{ClusterabilityReport, DipAggregate, MetricKind};
use crate::pruner::PruneEvent;
use crate::segnet::{count_flops, flops_reduction, load_checkpoint};

pub const CLUSTERABILITY_FILE: &str = "clusterability.csv";
pub const TRENDS_FILE: &str = "trends.csv";
pub const TREND_COUNTS_FILE: &str = "trend_counts.csv";
pub const FLOPS_REPORT_FILE: &str = "report_flops.csv";
pub const QUALITY_REPORT_FILE: &str = "report_quality.csv";
pub const TIMELINE_REPORT_FILE: &str = "report_prune_timeline.csv";

#[derive(Debug, Clone)]
pub struct AnalyzeOutputs {
    pub report: ClusterabilityReport,
    pub files: Vec<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct ReportOutputs {
    pub initial_flops: u64,
    pub final_flops: u64,
    /// Percent.
    pub flops_reduction: f64,
    pub files: Vec<PathBuf>,
}

/// Clusterability measures and trends from the run's feature-map dumps.
pub fn analyze_run(run: &Path) -> Result<AnalyzeOutputs, HarnessError> {
    let maps = run.join(MAPS_DIR);
    if !maps.is_dir() {
        return Err(HarnessError::Run(format!("{} has no feature-map dumps (train with capture on)", run.display())));
    }
    let report = ClusterabilityReport::from_dump_dir(&maps, DipAggregate::Mean)?;
    let files = vec![run.join(CLUSTERABILITY_FILE), run.join(TRENDS_FILE), run.join(TREND_COUNTS_FILE)];
    report.write_csv(&mut BufWriter::new(File::create(&files[0])?))?;
    report.write_trend_csv(&mut BufWriter::new(File::create(&files[1])?))?;
    let mut out = BufWriter::new(File::create(&files[2])?);
    writeln!(out, "metric,increase,decrease,similar")?;
    for (name, kind) in [("dip", MetricKind::Dip), ("neighbors", MetricKind::Neighbors), ("distance", MetricKind::Distance)] {
        let c = report.trend_counts(kind)?;
        writeln!(out, "{name},{},{},{}", c["increase"], c["decrease"], c["similar"])?;
    }
    out.flush()?;
    Ok(AnalyzeOutputs { report, files })
}

/// FLOPs per layer before and after, per-epoch quality, and the prune timeline.
pub fn report_run(run: &Path) -> Result<ReportOutputs, HarnessError> {
    let cfg = TrainConfig::load(&run.join(CONFIG_FILE))?;
    let (h, w) = (cfg.dataset.height, cfg.dataset.width);
    let ckpt = run.join(CHECKPOINT_DIR);
    let before = count_flops(&load_checkpoint::<f64>(&ckpt.join(INITIAL_CHECKPOINT))?, h, w)?;
    let after = count_flops(&load_checkpoint::<f64>(&ckpt.join(FINAL_CHECKPOINT))?, h, w)?;
    let reduction = flops_reduction(before.total, after.total)?;
    let files = vec![run.join(FLOPS_REPORT_FILE), run.join(QUALITY_REPORT_FILE), run.join(TIMELINE_REPORT_FILE)];

    let mut out = BufWriter::new(File::create(&files[0])?);
    writeln!(out, "layer,c_in_before,c_out_before,flops_before,c_in_after,c_out_after,flops_after")?;
    for ((name, cb, fb), (_, ca, fa)) in before.per_layer.iter().zip(&after.per_layer) {
        writeln!(out, "{name},{},{},{fb},{},{},{fa}", cb.c_in, cb.c_out, ca.c_in, ca.c_out)?;
    }
    writeln!(out, "total,,,{},,,{}", before.total, after.total)?;
    writeln!(out, "reduction,,,,,,{reduction}")?;
    out.flush()?;

    // keep only the epoch and quality columns of the metrics table
    let metrics = BufReader::new(File::open(run.join(METRICS_FILE))?);
    let mut lines = metrics.lines();
    let header = lines.next().ok_or_else(|| HarnessError::Run("empty metrics table".into()))??;
    let keep: Vec<usize> = header
        .split(',')
        .enumerate()
        .filter(|(_, c)| *c == "epoch" || c.starts_with("dice_") || c.starts_with("hd95_"))
        .map(|(i, _)| i)
        .collect();
    let mut out = BufWriter::new(File::create(&files[1])?);
    let pick = |line: &str| {
        let cols: Vec<&str> = line.split(',').collect();
        keep.iter().map(|&i| cols.get(i).copied().unwrap_or("")).collect::<Vec<_>>().join(",")
    };
    writeln!(out, "{}", pick(&header))?;
    for line in lines {
        writeln!(out, "{}", pick(&line?))?;
    }
    out.flush()?;

    let mut out = BufWriter::new(File::create(&files[2])?);
    writeln!(out, "epoch,layer,tau,removed,reference,removed_ids")?;
    for line in fs::read_to_string(run.join(PRUNE_LOG_FILE))?.lines().filter(|l| !l.trim().is_empty()) {
        let e: PruneEvent = serde_json::from_str(line).map_err(|e| HarnessError::Run(format!("prune log: {e}")))?;
        let ids: Vec<String> = e.removed.iter().map(usize::to_string).collect();
        writeln!(out, "{},{},{},{},{},{}", e.epoch, e.layer, e.tau, e.removed.len(), e.reference, ids.join(" "))?;
    }
    out.flush()?;
    Ok(ReportOutputs { initial_flops: before.total, final_flops: after.total, flops_reduction: reduction, files })
}
