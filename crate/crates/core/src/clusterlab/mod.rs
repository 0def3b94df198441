//! Clusterability measures of layer feature maps and their trends over
//! training.
//!
//! All measures work on the pairwise channel distance matrix of a layer:
//! the Euclidean distance between pooled, normalized channel maps,
//! averaged over the samples of the probe batch.

mod dip;
mod dump;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{pooled_view, DeltaNormMode, LossError};
use crate::scalar::Scalar;
use crate::segnet::FeatureMapRecord;
use crate::tensor::TensorError;

pub use dip::dip_statistic;
pub use dump::{FeatureMapDump, DUMP_VERSION};

/// Neighbor radius as a fraction of the largest first-channel distance.
pub const NEIGHBOR_FRACTION: f64 = 0.2;
/// Dip trends closer than this are "similar".
pub const DIP_SIMILAR: f64 = 0.001;
/// Neighbor and distance trends within this fraction of the first-third
/// mean are "similar".
pub const RELATIVE_SIMILAR: f64 = 0.05;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("need at least {need} channels, got {got}")]
    TooFewChannels { need: usize, got: usize },
    #[error("samples must be finite")]
    NonFinite,
    #[error("series of length {0} is too short for a trend (need 6)")]
    ShortSeries(usize),
    #[error("feature-map dump: {0}")]
    Dump(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl From<LossError> for ClusterError {
    fn from(e: LossError) -> Self {
        match e {
            LossError::Tensor(t) => ClusterError::Tensor(t),
            other => ClusterError::Dump(other.to_string()),
        }
    }
}

pub type Result<T, E = ClusterError> = std::result::Result<T, E>;

/// Symmetric `C x C` distance matrix with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelDistances {
    channels: usize,
    d: Vec<f64>,
}

impl ChannelDistances {
    /// `data` is `[channel][sample][element]`.
    pub fn from_vectors(channels: usize, samples: usize, len: usize, data: &[f64]) -> Self {
        assert_eq!(data.len(), channels * samples * len);
        let mut d = vec![0.0; channels * channels];
        let at = |c: usize, s: usize| &data[(c * samples + s) * len..(c * samples + s + 1) * len];
        for i in 0..channels {
            for j in i + 1..channels {
                let mut acc = 0.0;
                for s in 0..samples {
                    acc += at(i, s).iter().zip(at(j, s)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                }
                let v = if samples == 0 { 0.0 } else { acc / samples as f64 };
                d[i * channels + j] = v;
                d[j * channels + i] = v;
            }
        }
        ChannelDistances { channels, d }
    }

    /// Distances of a record's channels under the given pooling and
    /// normalization.
    pub fn from_record<T: Scalar>(record: &FeatureMapRecord<T>, omega: usize, mode: DeltaNormMode) -> Result<Self> {
        Ok(FeatureMapDump::from_record(record, omega, mode)?.distances())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.channels + j]
    }

    fn need(&self, n: usize) -> Result<()> {
        if self.channels < n {
            return Err(ClusterError::TooFewChannels { need: n, got: self.channels });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DipAggregate {
    #[default]
    Mean,
    Max,
}

/// Dip of each channel's distances to all other channels, aggregated over
/// channels. Needs at least three channels.
pub fn dip_dist(d: &ChannelDistances, aggregate: DipAggregate) -> Result<f64> {
    d.need(3)?;
    let c = d.channels;
    let mut dips = Vec::with_capacity(c);
    for i in 0..c {
        let row: Vec<f64> = (0..c).filter(|&j| j != i).map(|j| d.get(i, j)).collect();
        dips.push(dip_statistic(&row)?);
    }
    Ok(match aggregate {
        DipAggregate::Mean => dips.iter().sum::<f64>() / c as f64,
        DipAggregate::Max => dips.iter().copied().fold(0.0, f64::max),
    })
}

/// Mean number of other channels within `fraction` of the largest distance
/// from channel 0. Counts use `<=`, so identical channels all neighbor
/// each other.
pub fn neighbor_count(d: &ChannelDistances, fraction: f64) -> Result<f64> {
    d.need(2)?;
    let c = d.channels;
    let r = fraction * (1..c).map(|j| d.get(0, j)).fold(0.0, f64::max);
    let total: usize = (0..c).map(|i| (0..c).filter(|&j| j != i && d.get(i, j) <= r).count()).sum();
    Ok(total as f64 / c as f64)
}

/// `(1/C) Σ_{r≥1} d(0, r)`: the layer's channel-distance regularizer term.
pub fn avg_first_distance(d: &ChannelDistances) -> Result<f64> {
    d.need(2)?;
    Ok((1..d.channels).map(|j| d.get(0, j)).sum::<f64>() / d.channels as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Dip,
    Neighbors,
    Distance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trend {
    Increase,
    Decrease,
    Similar,
}

impl Trend {
    pub fn as_str(&self) -> &'static str {
        match self {
            Trend::Increase => "increase",
            Trend::Decrease => "decrease",
            Trend::Similar => "similar",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendSummary {
    /// Mean of the first third.
    pub p1: f64,
    /// Mean of the last third.
    pub p2: f64,
    pub trend: Trend,
}

/// Compares the means of the first and last thirds of `series`.
pub fn classify_trend(series: &[f64], kind: MetricKind) -> Result<TrendSummary> {
    if series.len() < 6 {
        return Err(ClusterError::ShortSeries(series.len()));
    }
    let k = series.len() / 3;
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (p1, p2) = (mean(&series[..k]), mean(&series[series.len() - k..]));
    let tol = match kind {
        MetricKind::Dip => DIP_SIMILAR,
        MetricKind::Neighbors | MetricKind::Distance => RELATIVE_SIMILAR * p1.abs(),
    };
    let trend = if (p2 - p1).abs() < tol {
        Trend::Similar
    } else if p2 > p1 {
        Trend::Increase
    } else {
        Trend::Decrease
    };
    Ok(TrendSummary { p1, p2, trend })
}

/// Measures of one layer at one epoch. `dip` is absent below three channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub layer: String,
    pub epoch: usize,
    pub channels: usize,
    pub dip: Option<f64>,
    pub neighbors: f64,
    pub distance: f64,
}

impl ReportRow {
    pub fn measure(layer: &str, epoch: usize, d: &ChannelDistances, aggregate: DipAggregate) -> Result<Self> {
        Ok(ReportRow {
            layer: layer.to_string(),
            epoch,
            channels: d.channels(),
            dip: (d.channels() >= 3).then(|| dip_dist(d, aggregate)).transpose()?,
            neighbors: neighbor_count(d, NEIGHBOR_FRACTION)?,
            distance: avg_first_distance(d)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTrends {
    pub layer: String,
    pub dip: Option<TrendSummary>,
    pub neighbors: TrendSummary,
    pub distance: TrendSummary,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClusterabilityReport {
    /// Layers in first-seen order, then epochs ascending.
    pub rows: Vec<ReportRow>,
}

impl ClusterabilityReport {
    /// Reads every `*.fmap` file below `dir`.
    pub fn from_dump_dir(dir: &Path, aggregate: DipAggregate) -> Result<Self> {
        let mut files = Vec::new();
        collect_dumps(dir, &mut files)?;
        files.sort();
        let mut report = ClusterabilityReport::default();
        for f in files {
            let dump = FeatureMapDump::read(&f)?;
            if dump.channels >= 2 {
                report.rows.push(ReportRow::measure(&dump.layer, dump.epoch, &dump.distances(), aggregate)?);
            }
        }
        report.sort();
        Ok(report)
    }

    pub fn from_records<T: Scalar>(
        records: &[FeatureMapRecord<T>],
        omega: usize,
        mode: DeltaNormMode,
        aggregate: DipAggregate,
    ) -> Result<Self> {
        let mut report = ClusterabilityReport::default();
        for r in records {
            if r.channels() >= 2 {
                let d = ChannelDistances::from_record(r, omega, mode)?;
                report.rows.push(ReportRow::measure(&r.layer, r.epoch, &d, aggregate)?);
            }
        }
        report.sort();
        Ok(report)
    }

    pub fn from_rows(rows: Vec<ReportRow>) -> Self {
        let mut report = ClusterabilityReport { rows };
        report.sort();
        report
    }

    fn sort(&mut self) {
        let mut order: Vec<String> = Vec::new();
        for r in &self.rows {
            if !order.contains(&r.layer) {
                order.push(r.layer.clone());
            }
        }
        let rank = |l: &str| order.iter().position(|o| o == l).unwrap_or(usize::MAX);
        self.rows.sort_by(|a, b| rank(&a.layer).cmp(&rank(&b.layer)).then(a.epoch.cmp(&b.epoch)));
    }

    /// Per-epoch series of each layer.
    fn series(&self) -> Vec<(String, Vec<&ReportRow>)> {
        let mut out: Vec<(String, Vec<&ReportRow>)> = Vec::new();
        for r in &self.rows {
            match out.iter_mut().find(|(l, _)| *l == r.layer) {
                Some((_, v)) => v.push(r),
                None => out.push((r.layer.clone(), vec![r])),
            }
        }
        out
    }

    /// Trends of every layer with at least six epochs. A layer's dip trend
    /// is absent if any epoch lacked a dip value.
    pub fn trends(&self) -> Result<Vec<LayerTrends>> {
        let mut out = Vec::new();
        for (layer, rows) in self.series() {
            if rows.len() < 6 {
                continue;
            }
            let dips: Option<Vec<f64>> = rows.iter().map(|r| r.dip).collect();
            let neighbors: Vec<f64> = rows.iter().map(|r| r.neighbors).collect();
            let distance: Vec<f64> = rows.iter().map(|r| r.distance).collect();
            out.push(LayerTrends {
                layer,
                dip: dips.map(|d| classify_trend(&d, MetricKind::Dip)).transpose()?,
                neighbors: classify_trend(&neighbors, MetricKind::Neighbors)?,
                distance: classify_trend(&distance, MetricKind::Distance)?,
            });
        }
        Ok(out)
    }

    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "layer,epoch,channels,dip,neighbors,distance")?;
        for r in &self.rows {
            let dip = r.dip.map(|d| d.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{},{},{},{}", r.layer, r.epoch, r.channels, dip, r.neighbors, r.distance)?;
        }
        Ok(())
    }

    pub fn write_trend_csv(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "layer,dip_first,dip_last,dip_trend,neighbors_first,neighbors_last,neighbors_trend,distance_first,distance_last,distance_trend")?;
        for t in self.trends()? {
            let dip = match t.dip {
                Some(s) => format!("{},{},{}", s.p1, s.p2, s.trend.as_str()),
                None => ",,".to_string(),
            };
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                t.layer,
                dip,
                t.neighbors.p1,
                t.neighbors.p2,
                t.neighbors.trend.as_str(),
                t.distance.p1,
                t.distance.p2,
                t.distance.trend.as_str()
            )?;
        }
        Ok(())
    }

    /// Count of layers per trend label for one measure.
    pub fn trend_counts(&self, kind: MetricKind) -> Result<BTreeMap<&'static str, usize>> {
        let mut counts = BTreeMap::from([("increase", 0), ("decrease", 0), ("similar", 0)]);
        for t in self.trends()? {
            let s = match kind {
                MetricKind::Dip => t.dip,
                MetricKind::Neighbors => Some(t.neighbors),
                MetricKind::Distance => Some(t.distance),
            };
            if let Some(s) = s {
                *counts.get_mut(s.trend.as_str()).unwrap() += 1;
            }
        }
        Ok(counts)
    }
}

fn collect_dumps(dir: &Path, out: &mut Vec<std::path::PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_dumps(&path, out)?;
        } else if path.extension().is_some_and(|e| e == "fmap") {
            out.push(path);
        }
    }
    Ok(())
}

/// Pooled view used by the analysis, exposed for callers that build their
/// own geometry.
pub fn analysis_view<T: Scalar>(record: &FeatureMapRecord<T>, omega: usize, mode: DeltaNormMode) -> Result<crate::tensor::Tensor<T>> {
    Ok(pooled_view(&record.output.detach(), omega, mode)?)
}
