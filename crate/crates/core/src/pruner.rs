//! Adaptive-threshold filter pruning.
//!
//! Each prunable layer owns a threshold `tau` that starts at zero and rises
//! in fixed steps once training has settled for that layer. At every epoch
//! end, channels whose epoch-mean normalized distance to a per-epoch random
//! reference channel is at most `tau` are removed from the network.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::reference_distances;
use crate::scalar::Scalar;
use crate::segnet::{FeatureMapRecord, NetworkError, NetworkGraph};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum PruneError {
    #[error("invalid pruner config: {0}")]
    Config(String),
    #[error("layer {0} has no threshold state")]
    UnknownLayer(String),
    #[error("distances for layer {layer} cover {got} channels, layer has {live}")]
    StaleDistances { layer: String, got: usize, live: usize },
    #[error("pruning step aborted at layer {layer}: {source}")]
    Structural { layer: String, source: NetworkError },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("prune log: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = PruneError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrunerConfig {
    pub tau_max: f64,
    /// Number of equal steps from 0 to `tau_max`.
    pub kappa: u32,
    /// Minimum epochs between two increases of the same threshold.
    pub rho: usize,
    /// Percent of live filters below which the previous epoch counts as quiet.
    pub mu: f64,
    /// Require the latest validation loss to exceed every previous one,
    /// instead of merely not setting a new minimum.
    #[serde(default)]
    pub strict_validation_increase: bool,
}

impl Default for PrunerConfig {
    fn default() -> Self {
        PrunerConfig { tau_max: 0.3, kappa: 15, rho: 5, mu: 2.0, strict_validation_increase: false }
    }
}

impl PrunerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_max > 0.0 && self.tau_max <= 1.0) {
            return Err(PruneError::Config(format!("tau_max must be in (0, 1], got {}", self.tau_max)));
        }
        if self.kappa == 0 {
            return Err(PruneError::Config("kappa must be >= 1".into()));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(PruneError::Config(format!("mu must be finite and >= 0, got {}", self.mu)));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        self.tau_max / f64::from(self.kappa)
    }
}

/// Divides by the maximum; an all-zero input stays zero.
pub fn normalize_by_max(d: &[f64]) -> Vec<f64> {
    let m = d.iter().copied().fold(0.0, f64::max);
    if m == 0.0 {
        vec![0.0; d.len()]
    } else {
        d.iter().map(|v| v / m).collect()
    }
}

/// Batch-mean of per-sample max-normalized distances from channel
/// `reference` to every other channel, on maps average-pooled by `omega`.
/// Entries follow channel order with `reference` skipped; a single-channel
/// layer gives an empty result.
pub fn delta_prune<T: Scalar>(record: &FeatureMapRecord<T>, reference: usize, omega: usize) -> Result<Vec<f64>> {
    let [b, c, _, _] = record.output.dims4("delta_prune")?;
    if c < 2 {
        return Ok(Vec::new());
    }
    let pooled = record.output.detach().avg_pool2d(omega)?;
    let d = reference_distances(&pooled, reference).map_err(|e| match e {
        crate::losses::LossError::Tensor(t) => PruneError::Tensor(t),
        other => PruneError::Config(other.to_string()),
    })?;
    let mut mean = vec![0.0; c - 1];
    for row in d.data().chunks(c - 1) {
        let raw: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
        for (m, v) in mean.iter_mut().zip(normalize_by_max(&raw)) {
            *m += v / b as f64;
        }
    }
    Ok(mean)
}

/// Uniform reference channel among `channels` live ones.
pub fn sample_reference(channels: usize, rng: &mut impl Rng) -> usize {
    if channels <= 1 {
        0
    } else {
        rng.random_range(0..channels)
    }
}

/// Running per-layer mean of `delta_prune` over one epoch's batches.
#[derive(Debug, Clone)]
pub struct EpochDistances {
    omega: usize,
    layers: BTreeMap<usize, LayerDistances>,
}

#[derive(Debug, Clone)]
struct LayerDistances {
    reference: usize,
    channels: usize,
    sum: Vec<f64>,
    batches: usize,
}

impl EpochDistances {
    /// Draws this epoch's reference channel for every prunable layer, in
    /// network order.
    pub fn begin<T: Scalar>(net: &NetworkGraph<T>, omega: usize, rng: &mut impl Rng) -> Self {
        let layers = net
            .prunable_indices()
            .into_iter()
            .map(|i| {
                let channels = net.layers()[i].out_channels();
                let reference = sample_reference(channels, rng);
                (i, LayerDistances { reference, channels, sum: vec![0.0; channels.saturating_sub(1)], batches: 0 })
            })
            .collect();
        EpochDistances { omega, layers }
    }

    /// Reference channel (live position) of layer `index`.
    pub fn reference(&self, index: usize) -> Option<usize> {
        self.layers.get(&index).map(|l| l.reference)
    }

    /// Overrides a reference channel before any batch was accumulated.
    pub fn set_reference(&mut self, index: usize, reference: usize) {
        if let Some(l) = self.layers.get_mut(&index) {
            assert!(l.batches == 0 && reference < l.channels.max(1));
            l.reference = reference;
        }
    }

    pub fn accumulate<T: Scalar>(&mut self, records: &[FeatureMapRecord<T>]) -> Result<()> {
        for rec in records {
            let Some(l) = self.layers.get_mut(&rec.layer_index) else { continue };
            if rec.channels() != l.channels {
                return Err(PruneError::StaleDistances { layer: rec.layer.clone(), got: l.channels, live: rec.channels() });
            }
            let d = delta_prune(rec, l.reference, self.omega)?;
            l.sum.iter_mut().zip(d).for_each(|(s, v)| *s += v);
            l.batches += 1;
        }
        Ok(())
    }

    /// Epoch mean for layer `index`, one entry per live channel; the
    /// reference channel's entry is `None`.
    pub fn means(&self, index: usize) -> Option<Vec<Option<f64>>> {
        let l = self.layers.get(&index)?;
        if l.batches == 0 {
            return None;
        }
        let mut it = l.sum.iter().map(|s| s / l.batches as f64);
        Some((0..l.channels).map(|c| if c == l.reference { None } else { it.next() }).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conditions {
    /// Training loss strictly between its previous minimum and maximum.
    pub c1: bool,
    /// Validation loss is not improving.
    pub c2: bool,
    /// Few filters were pruned in this layer in the previous epoch.
    pub c3: bool,
    /// Threshold has not increased within the patience window.
    pub c4: bool,
}

impl Conditions {
    pub fn all(&self) -> bool {
        self.c1 && self.c2 && self.c3 && self.c4
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerThreshold {
    pub tau: f64,
    pub last_increase: Option<usize>,
    /// Filters pruned at each epoch end, keyed by epoch.
    pub pruned: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdState {
    pub config: PrunerConfig,
    layers: BTreeMap<String, LayerThreshold>,
    train_losses: Vec<f64>,
    val_losses: Vec<f64>,
}

impl ThresholdState {
    pub fn new(config: PrunerConfig, layer_names: impl IntoIterator<Item = String>) -> Result<Self> {
        config.validate()?;
        let layers = layer_names
            .into_iter()
            .map(|n| (n, LayerThreshold { tau: 0.0, last_increase: None, pruned: BTreeMap::new() }))
            .collect();
        Ok(ThresholdState { config, layers, train_losses: Vec::new(), val_losses: Vec::new() })
    }

    pub fn for_network<T: Scalar>(config: PrunerConfig, net: &NetworkGraph<T>) -> Result<Self> {
        Self::new(config, net.prunable_indices().into_iter().map(|i| net.layers()[i].name.clone()))
    }

    /// Appends one epoch's mean training and validation losses.
    pub fn record_losses(&mut self, train: f64, val: f64) {
        self.train_losses.push(train);
        self.val_losses.push(val);
    }

    pub fn layer(&self, name: &str) -> Result<&LayerThreshold> {
        self.layers.get(name).ok_or_else(|| PruneError::UnknownLayer(name.to_string()))
    }

    pub fn tau(&self, name: &str) -> Result<f64> {
        Ok(self.layer(name)?.tau)
    }

    pub fn taus(&self) -> impl Iterator<Item = (&str, f64)> {
        self.layers.iter().map(|(k, v)| (k.as_str(), v.tau))
    }

    /// Conditions for `layer` at the end of `epoch` with `live` filters.
    /// Everything is false until two epochs of losses are recorded.
    pub fn conditions(&self, name: &str, epoch: usize, live: usize) -> Result<Conditions> {
        let l = self.layer(name)?;
        let n = self.train_losses.len();
        if n < 2 {
            return Ok(Conditions { c1: false, c2: false, c3: false, c4: false });
        }
        let (train_prev, train_last) = (&self.train_losses[..n - 1], self.train_losses[n - 1]);
        let lo = train_prev.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = train_prev.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let c1 = train_last > lo && train_last < hi;

        let (val_prev, val_last) = (&self.val_losses[..n - 1], self.val_losses[n - 1]);
        let c2 = if self.config.strict_validation_increase {
            val_last > val_prev.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        } else {
            val_last >= val_prev.iter().copied().fold(f64::INFINITY, f64::min)
        };

        let prev_pruned = epoch.checked_sub(1).and_then(|e| l.pruned.get(&e)).copied().unwrap_or(0);
        let c3 = (prev_pruned as f64) < self.config.mu / 100.0 * live as f64;

        let c4 = l.last_increase.is_none_or(|t| epoch.saturating_sub(t) >= self.config.rho);
        Ok(Conditions { c1, c2, c3, c4 })
    }

    pub fn check_conditions(&self, name: &str, epoch: usize, live: usize) -> Result<bool> {
        Ok(self.conditions(name, epoch, live)?.all())
    }

    /// Raises `tau` by one step (clamped at `tau_max`). Returns whether it
    /// changed.
    pub fn increase_threshold(&mut self, name: &str, epoch: usize) -> Result<bool> {
        let step = self.config.step();
        let tau_max = self.config.tau_max;
        let l = self.layers.get_mut(name).ok_or_else(|| PruneError::UnknownLayer(name.to_string()))?;
        if l.tau >= tau_max {
            return Ok(false);
        }
        l.tau = (l.tau + step).min(tau_max);
        // snap to the grid so repeated additions cannot drift past a step
        let k = (l.tau / step).round();
        if (l.tau - k * step).abs() < 1e-9 * step {
            l.tau = (k * step).min(tau_max);
        }
        l.last_increase = Some(epoch);
        Ok(true)
    }

    pub fn record_pruned(&mut self, name: &str, epoch: usize, count: usize) -> Result<()> {
        let l = self.layers.get_mut(name).ok_or_else(|| PruneError::UnknownLayer(name.to_string()))?;
        l.pruned.insert(epoch, count);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneEvent {
    pub epoch: usize,
    pub layer: String,
    /// Original channel id of the reference channel.
    pub reference: usize,
    /// Original channel ids of the removed filters.
    pub removed: Vec<usize>,
    pub distances: Vec<f64>,
    pub tau: f64,
}

/// Live positions to remove: distance `<= tau`, never the reference. If
/// that would leave only the reference, the farthest candidate is kept.
pub fn select_removals(distances: &[Option<f64>], tau: f64) -> BTreeSet<usize> {
    let mut remove: BTreeSet<usize> =
        distances.iter().enumerate().filter_map(|(i, d)| d.filter(|d| *d <= tau).map(|_| i)).collect();
    let others = distances.iter().filter(|d| d.is_some()).count();
    if others > 0 && remove.len() == others {
        let farthest = distances
            .iter()
            .enumerate()
            .filter_map(|(i, d)| d.map(|d| (i, d)))
            .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((i, d)),
            })
            .map(|(i, _)| i);
        if let Some(f) = farthest {
            remove.remove(&f);
        }
    }
    remove
}

/// Epoch-end step: raise thresholds where the conditions hold, then remove
/// every channel within its layer's threshold.
///
/// Runs on copies of the network and state, so a structural error leaves
/// both untouched.
pub fn prune_step<T: Scalar>(
    net: &mut NetworkGraph<T>,
    distances: &EpochDistances,
    state: &mut ThresholdState,
    epoch: usize,
) -> Result<Vec<PruneEvent>> {
    let mut work = net.clone();
    let mut st = state.clone();
    let mut events = Vec::new();
    for li in net.prunable_indices() {
        let name = net.layers()[li].name.clone();
        let live = net.layers()[li].out_channels();
        if st.check_conditions(&name, epoch, live)? {
            st.increase_threshold(&name, epoch)?;
        }
        let tau = st.tau(&name)?;
        let Some(means) = distances.means(li) else {
            st.record_pruned(&name, epoch, 0)?;
            continue;
        };
        if means.len() != live {
            return Err(PruneError::StaleDistances { layer: name, got: means.len(), live });
        }
        let remove = select_removals(&means, tau);
        st.record_pruned(&name, epoch, remove.len())?;
        if remove.is_empty() {
            continue;
        }
        let ids = &work.layers()[li].channel_ids;
        let reference = distances.reference(li).expect("layer has distances");
        let event = PruneEvent {
            epoch,
            layer: name.clone(),
            reference: ids[reference],
            removed: remove.iter().map(|&i| ids[i]).collect(),
            distances: remove.iter().map(|&i| means[i].expect("reference is never removed")).collect(),
            tau,
        };
        work.remove_filters_at(li, &remove).map_err(|source| PruneError::Structural { layer: name, source })?;
        events.push(event);
    }
    work.audit().map_err(|source| PruneError::Structural { layer: "<audit>".into(), source })?;
    *net = work;
    *state = st;
    Ok(events)
}

/// Appends events as JSON lines.
pub fn write_events(out: &mut impl Write, events: &[PruneEvent]) -> Result<()> {
    for e in events {
        serde_json::to_writer(&mut *out, e).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
