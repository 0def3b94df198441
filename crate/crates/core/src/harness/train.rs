use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Precision, TrainConfig};
use super::data::{gen_synthetic, SyntheticDataset};
use super::eval::{argmax_labels, evaluate_labels, Evaluation};
use super::HarnessError;
use crate::clusterlab::{ClusterabilityReport, DipAggregate, FeatureMapDump, ReportRow};
use crate::losses::{cross_entropy, delta_opt, dice_loss, one_hot, total_loss, DeltaNormMode};
use crate::optim::{adam_step, poly_lr, AdamState};
use crate::pruner::{prune_step, write_events, EpochDistances, PruneEvent, ThresholdState};
use crate::scalar::Scalar;
use crate::segnet::{count_flops, flops_reduction, save_checkpoint, ForwardPass, Mode, NetworkGraph};
use crate::tensor::{backward, Tensor};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PRUNE_LOG_FILE: &str = "prune_log.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const MAPS_DIR: &str = "maps";
pub const INITIAL_CHECKPOINT: &str = "epoch_0000.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

// RNG streams derived from the run seed; network init uses the seed itself.
const DATA_SEED_MIX: u64 = 0x9E37_79B9_7F4A_7C15;
const SHUFFLE_STREAM: u64 = 1;
const PRUNE_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Mean regularizer value over the epoch's training batches.
    pub delta_opt: f64,
    pub lr: f64,
    /// Live prunable filters after the epoch-end pruning step.
    pub live_filters_total: usize,
    /// FLOPs after the epoch-end pruning step.
    pub flops: u64,
    pub dice: Vec<f64>,
    pub hd95: Vec<f64>,
    pub seconds: f64,
}

impl EpochMetrics {
    pub fn header(foreground_classes: usize) -> String {
        let mut cols: Vec<String> =
            ["epoch", "train_loss", "val_loss", "delta_opt", "lr", "live_filters_total", "flops"].map(String::from).to_vec();
        cols.extend((1..=foreground_classes).map(|c| format!("dice_{c}")));
        cols.extend((1..=foreground_classes).map(|c| format!("hd95_{c}")));
        cols.push("seconds".into());
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            self.epoch.to_string(),
            self.train_loss.to_string(),
            self.val_loss.to_string(),
            self.delta_opt.to_string(),
            self.lr.to_string(),
            self.live_filters_total.to_string(),
            self.flops.to_string(),
        ];
        cols.extend(self.dice.iter().chain(&self.hd95).map(f64::to_string));
        cols.push(format!("{:.6}", self.seconds));
        cols.join(",")
    }

    pub fn mean_dice(&self) -> f64 {
        self.dice.iter().sum::<f64>() / self.dice.len() as f64
    }
}

/// End-of-run figures, also written as `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub epochs: usize,
    pub initial_flops: u64,
    pub final_flops: u64,
    /// Percent.
    pub flops_reduction: f64,
    pub initial_live_filters: usize,
    pub final_live_filters: usize,
    pub prune_events: usize,
    pub final_val: Evaluation,
    pub test: Evaluation,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub metrics: Vec<EpochMetrics>,
    pub events: Vec<PruneEvent>,
    /// Present when feature maps were captured.
    pub clusterability: Option<ClusterabilityReport>,
    pub summary: RunSummary,
    pub checkpoints: Vec<PathBuf>,
}

/// Trains per `cfg` into `out`, dispatching on the configured precision.
pub fn run_training(cfg: &TrainConfig, out: &Path) -> Result<RunArtifacts, HarnessError> {
    match cfg.precision {
        Precision::F64 => run_training_as::<f64>(cfg, out).map(|(a, _)| a),
        Precision::F32 => run_training_as::<f32>(cfg, out).map(|(a, _)| a),
    }
}

fn batch_tensor<T: Scalar>(data: &SyntheticDataset, idx: &[usize], flip: Option<&[bool]>) -> Result<(Tensor<T>, Vec<usize>), HarnessError> {
    let (x, y) = data.batch(idx, flip);
    Ok((Tensor::from_f64(&x, [idx.len(), 1, data.height, data.width])?, y))
}

/// Total loss and the regularizer's value. The regularizer is evaluated
/// for logging even when `lambda = 0`, but then stays out of the loss.
fn batch_loss<T: Scalar>(pass: &ForwardPass<T>, labels: &[usize], cfg: &TrainConfig) -> Result<(Tensor<T>, f64), HarnessError> {
    let [b, c, h, w] = pass.logits.dims4("batch_loss")?;
    let ce = cross_entropy(&pass.logits, labels)?;
    let dice = dice_loss(&pass.logits.softmax_channels()?, &one_hot(labels, b, c, h, w)?)?;
    let dopt = delta_opt(&pass.records, &cfg.loss())?;
    let value = dopt.item().to_f64().unwrap_or(f64::NAN);
    Ok((total_loss(&ce, &dice, Some(&dopt), cfg.lambda)?, value))
}

/// Loss and per-class scores of `net` over images `idx` in eval mode.
pub fn evaluate_split<T: Scalar>(
    net: &NetworkGraph<T>,
    data: &SyntheticDataset,
    idx: &[usize],
    cfg: &TrainConfig,
) -> Result<(f64, Evaluation), HarnessError> {
    if idx.is_empty() {
        return Err(HarnessError::Config("cannot evaluate an empty split".into()));
    }
    let (mut loss, mut preds, mut targets) = (0.0, Vec::new(), Vec::new());
    let plane = data.height * data.width;
    for chunk in idx.chunks(cfg.batch_size) {
        let (x, y) = batch_tensor::<T>(data, chunk, None)?;
        let pass = net.forward(&x, true, Mode::Eval)?;
        let (l, _) = batch_loss(&pass, &y, cfg)?;
        loss += l.item().to_f64().unwrap_or(f64::NAN) * chunk.len() as f64;
        let logits: Vec<f64> = pass.logits.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
        preds.extend(argmax_labels(&logits, chunk.len(), data.classes, plane));
        targets.extend(y.chunks(plane).map(<[usize]>::to_vec));
    }
    Ok((loss / idx.len() as f64, evaluate_labels(&preds, &targets, data.classes, data.height, data.width)))
}

/// Forwards the probe images, writes one dump per prunable layer and
/// returns the layer measures.
fn capture<T: Scalar>(
    net: &NetworkGraph<T>,
    data: &SyntheticDataset,
    cfg: &TrainConfig,
    epoch: usize,
    dir: &Path,
) -> Result<Vec<ReportRow>, HarnessError> {
    let probe = &data.val[..cfg.probe_images.min(data.val.len())];
    let (x, _) = batch_tensor::<T>(data, probe, None)?;
    let pass = net.forward(&x, true, Mode::Eval)?;
    let epoch_dir = dir.join(MAPS_DIR).join(format!("epoch_{epoch:04}"));
    fs::create_dir_all(&epoch_dir)?;
    let mut rows = Vec::new();
    for mut rec in pass.records {
        rec.epoch = epoch;
        let dump = FeatureMapDump::from_record(&rec, cfg.omega, DeltaNormMode::MinmaxFeatureMaps)?;
        dump.write(&epoch_dir.join(format!("{}.fmap", rec.layer)))?;
        if dump.channels >= 2 {
            rows.push(ReportRow::measure(&rec.layer, epoch, &dump.distances(), DipAggregate::Mean)?);
        }
    }
    Ok(rows)
}

/// Errors raised inside a training batch that stem from non-finite values.
fn non_finite(e: &HarnessError) -> bool {
    use crate::losses::LossError;
    use crate::optim::OptimError;
    use crate::segnet::NetworkError;
    use crate::tensor::TensorError;
    matches!(
        e,
        HarnessError::Tensor(TensorError::NonFinite { .. })
            | HarnessError::Network(NetworkError::Tensor(TensorError::NonFinite { .. }))
            | HarnessError::Loss(LossError::Tensor(TensorError::NonFinite { .. }))
            | HarnessError::Optim(OptimError::NonFiniteGradient { .. })
            | HarnessError::Optim(OptimError::Tensor(TensorError::NonFinite { .. }))
    )
}

/// The full training loop at scalar type `T`; also returns the final network.
pub fn run_training_as<T: Scalar>(cfg: &TrainConfig, out: &Path) -> Result<(RunArtifacts, NetworkGraph<T>), HarnessError> {
    cfg.validate()?;
    let ds = cfg.dataset;
    let data = gen_synthetic(cfg.seed.wrapping_mul(DATA_SEED_MIX).wrapping_add(1), ds.n, ds.height, ds.width, ds.classes)?;
    let mut net = NetworkGraph::<T>::build_unet(cfg.unet(), cfg.seed)?;
    let mut adam = AdamState::new(cfg.adam());
    let mut thresholds = ThresholdState::for_network(cfg.pruner(), &net)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);
    let mut prune_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    prune_rng.set_stream(PRUNE_STREAM);

    let ckpt_dir = out.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_toml())?;
    let mut metrics_out = BufWriter::new(File::create(out.join(METRICS_FILE))?);
    writeln!(metrics_out, "{}", EpochMetrics::header(ds.classes - 1))?;
    metrics_out.flush()?;
    let mut log_out = BufWriter::new(File::create(out.join(PRUNE_LOG_FILE))?);

    let mut checkpoints = vec![ckpt_dir.join(INITIAL_CHECKPOINT)];
    save_checkpoint(&net, &checkpoints[0])?;
    let initial_flops = count_flops(&net, ds.height, ds.width)?.total;
    let initial_live = net.live_filters();
    let mut rows = Vec::new();
    if cfg.capture_feature_maps {
        rows.extend(capture(&net, &data, cfg, 0, out)?);
    }

    let mut order = data.train.clone();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut events = Vec::new();
    let mut final_val = None;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let lr = poly_lr(epoch - 1, cfg.epochs, cfg.lr0)?;
        let mut distances = cfg.pruning_enabled.then(|| EpochDistances::begin(&net, cfg.omega, &mut prune_rng));
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut dopt_sum, mut batches) = (0.0, 0.0, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let flips: Option<Vec<bool>> =
                cfg.horizontal_flip.then(|| chunk.iter().map(|_| shuffle_rng.random_bool(0.5)).collect());
            let step = |net: &mut NetworkGraph<T>, adam: &mut AdamState| -> Result<_, HarnessError> {
                let (x, y) = batch_tensor::<T>(&data, chunk, flips.as_deref())?;
                let pass = net.forward(&x, true, Mode::Train)?;
                let (loss, dopt) = batch_loss(&pass, &y, cfg)?;
                let value = loss.item().to_f64().unwrap_or(f64::NAN);
                if !value.is_finite() {
                    return Err(HarnessError::NonFiniteLoss { epoch, batch: bi });
                }
                let grads = backward(&loss)?;
                adam_step(&mut net.params_mut(), &grads, adam, lr)?;
                net.update_running_stats(&pass.batch_stats);
                Ok((value, dopt, pass.records))
            };
            let (value, dopt, records) = step(&mut net, &mut adam).map_err(|e| {
                if non_finite(&e) {
                    HarnessError::NonFiniteLoss { epoch, batch: bi }
                } else {
                    e
                }
            })?;
            if let Some(d) = distances.as_mut() {
                d.accumulate(&records)?;
            }
            loss_sum += value;
            dopt_sum += dopt;
            batches += 1;
        }
        let train_loss = loss_sum / batches as f64;
        let (val_loss, val_eval) = evaluate_split(&net, &data, &data.val, cfg)?;
        thresholds.record_losses(train_loss, val_loss);
        let epoch_events = match &distances {
            Some(d) => prune_step(&mut net, d, &mut thresholds, epoch)?,
            None => Vec::new(),
        };
        write_events(&mut log_out, &epoch_events)?;
        log_out.flush()?;
        let flops = count_flops(&net, ds.height, ds.width)?.total;
        let seconds = started.elapsed().as_secs_f64();
        if !epoch_events.is_empty() {
            let path = ckpt_dir.join(format!("epoch_{epoch:04}.ckpt"));
            save_checkpoint(&net, &path)?;
            checkpoints.push(path);
        }
        if cfg.capture_feature_maps {
            rows.extend(capture(&net, &data, cfg, epoch, out)?);
        }
        let m = EpochMetrics {
            epoch,
            train_loss,
            val_loss,
            delta_opt: dopt_sum / batches as f64,
            lr,
            live_filters_total: net.live_filters(),
            flops,
            dice: val_eval.dice.clone(),
            hd95: val_eval.hd95.clone(),
            seconds,
        };
        writeln!(metrics_out, "{}", m.csv_row())?;
        metrics_out.flush()?;
        metrics.push(m);
        events.extend(epoch_events);
        final_val = Some(val_eval);
    }

    let final_path = ckpt_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&net, &final_path)?;
    checkpoints.push(final_path);
    let final_flops = count_flops(&net, ds.height, ds.width)?.total;
    let (_, test) = evaluate_split(&net, &data, &data.test, cfg)?;
    let summary = RunSummary {
        epochs: cfg.epochs,
        initial_flops,
        final_flops,
        flops_reduction: flops_reduction(initial_flops, final_flops)?,
        initial_live_filters: initial_live,
        final_live_filters: net.live_filters(),
        prune_events: events.len(),
        final_val: final_val.expect("at least one epoch"),
        test,
    };
    fs::write(out.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary).map_err(std::io::Error::from)?)?;
    let clusterability = cfg.capture_feature_maps.then(|| ClusterabilityReport::from_rows(rows));
    Ok((RunArtifacts { dir: out.to_path_buf(), metrics, events, clusterability, summary, checkpoints }, net))
}
