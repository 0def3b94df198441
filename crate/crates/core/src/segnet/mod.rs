//! Prunable U-Net.
//!
//! The network is an ordered list of convolution layers. Each layer names
//! the producers it consumes (the image input or earlier layers); when a
//! layer has several producers their outputs are concatenated along the
//! channel axis in the listed order. Those source lists are the channel
//! provenance used to cascade filter removal into every consumer,
//! including the decoder convolutions fed through skip connections.

mod checkpoint;
mod flops;

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::Param;
use crate::scalar::Scalar;
use crate::tensor::{BatchStats, Tensor, TensorError, DEFAULT_NORM_EPS};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, CHECKPOINT_VERSION};
pub use flops::{count_flops, flops_reduction, FlopsReport, LayerCost};

/// Most filters any level may have.
pub const FILTER_CAP: usize = 480;

const LEAKY_SLOPE: f64 = 0.01;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("input has {got} channels, network expects {want}")]
    InputChannels { got: usize, want: usize },
    #[error("input {h}x{w} is not divisible by {factor}")]
    Indivisible { h: usize, w: usize, factor: usize },
    #[error("no layer named {0:?}")]
    UnknownLayer(String),
    #[error("layer {0} is not prunable")]
    NotPrunable(String),
    #[error("layer {layer}: channel {index} out of range (has {live})")]
    ChannelOutOfRange { layer: String, index: usize, live: usize },
    #[error("layer {layer}: removing {removing} of {live} filters would empty it")]
    WouldEmpty { layer: String, removing: usize, live: usize },
    #[error("channel audit failed at {layer}: {msg}")]
    Audit { layer: String, msg: String },
    #[error("FLOPs increased from {before} to {after}")]
    FlopsIncreased { before: u64, after: u64 },
    #[error("FLOPs baseline must be positive")]
    ZeroFlops,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = NetworkError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Instance,
    Batch,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
    Relu,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    ConvTranspose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Input,
    Layer(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch norm uses batch statistics.
    Train,
    /// Batch norm uses running statistics.
    Eval,
}

/// Running mean/variance of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// One convolution block: conv (or transposed conv), optional normalization
/// with affine parameters, optional activation.
#[derive(Debug, Clone)]
pub struct PrunableConvLayer<T: Scalar> {
    pub name: String,
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out, in, k, k]` for both kinds.
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub norm: NormKind,
    /// `(gamma, beta)` when `norm` is not `None`.
    pub affine: Option<(Param<T>, Param<T>)>,
    pub running: Option<RunningStats<T>>,
    pub activation: Activation,
    pub prunable: bool,
    pub inputs: Vec<Source>,
    /// Original index of each live output channel.
    pub channel_ids: Vec<usize>,
}

impl<T: Scalar> PrunableConvLayer<T> {
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = vec![&mut self.weight, &mut self.bias];
        if let Some((g, b)) = &mut self.affine {
            out.push(g);
            out.push(b);
        }
        out
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = vec![&self.weight, &self.bias];
        if let Some((g, b)) = &self.affine {
            out.push(g);
            out.push(b);
        }
        out
    }

    /// Spatial output size for an input of `h x w`.
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        use crate::tensor::{conv_output_len, conv_transpose_output_len};
        let f = match self.kind {
            LayerKind::Conv => conv_output_len,
            LayerKind::ConvTranspose => conv_transpose_output_len,
        };
        Some((f(h, self.kernel, self.stride, self.padding)?, f(w, self.kernel, self.stride, self.padding)?))
    }

    fn keep_outputs(&mut self, keep: &[usize]) -> Result<()> {
        self.weight.select(0, keep)?;
        self.bias.select(0, keep)?;
        if let Some((g, b)) = &mut self.affine {
            g.select(0, keep)?;
            b.select(0, keep)?;
        }
        if let Some(r) = &mut self.running {
            r.mean = keep.iter().map(|&i| r.mean[i]).collect();
            r.var = keep.iter().map(|&i| r.var[i]).collect();
        }
        self.channel_ids = keep.iter().map(|&i| self.channel_ids[i]).collect();
        Ok(())
    }

    fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Option<BatchStats<T>>)> {
        let w = self.weight.value();
        let b = Some(self.bias.value());
        let mut y = match self.kind {
            LayerKind::Conv => x.conv2d(w, b, self.stride, self.padding)?,
            LayerKind::ConvTranspose => x.conv_transpose2d(w, b, self.stride, self.padding)?,
        };
        let eps = T::from_f64_lossy(DEFAULT_NORM_EPS);
        let mut stats = None;
        match (self.norm, mode) {
            (NormKind::None, _) => {}
            (NormKind::Instance, _) => y = y.instance_norm(eps)?,
            (NormKind::Batch, Mode::Train) => {
                let (n, s) = y.batch_norm(eps)?;
                y = n;
                stats = Some(s);
            }
            (NormKind::Batch, Mode::Eval) => {
                let r = self.running.as_ref().ok_or_else(|| {
                    NetworkError::Architecture(format!("{}: batch norm without running stats", self.name))
                })?;
                let scale: Vec<T> = r.var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
                let shift: Vec<T> = r.mean.iter().zip(&scale).map(|(m, s)| -*m * *s).collect();
                let c = scale.len();
                y = y.channel_affine(&Tensor::new(scale, [c])?, &Tensor::new(shift, [c])?)?;
            }
        }
        if let Some((g, bt)) = &self.affine {
            y = y.channel_affine(g.value(), bt.value())?;
        }
        y = match self.activation {
            Activation::None => y,
            Activation::Relu => y.relu()?,
            Activation::LeakyRelu => y.leaky_relu(T::from_f64_lossy(LEAKY_SLOPE))?,
        };
        Ok((y, stats))
    }
}

/// Post-block output of one prunable layer captured during a forward pass.
///
/// `output` stays attached to the graph so losses built from it
/// backpropagate into the network weights.
#[derive(Debug, Clone)]
pub struct FeatureMapRecord<T: Scalar> {
    pub layer: String,
    pub layer_index: usize,
    pub epoch: usize,
    /// `[B, C, H, W]` after normalization and activation.
    pub output: Tensor<T>,
}

impl<T: Scalar> FeatureMapRecord<T> {
    pub fn channels(&self) -> usize {
        self.output.shape()[1]
    }

    /// Average-pooled view with window and stride `omega`.
    pub fn pooled(&self, omega: usize) -> Result<Tensor<T>, TensorError> {
        self.output.avg_pool2d(omega)
    }
}

#[derive(Debug)]
pub struct ForwardPass<T: Scalar> {
    pub logits: Tensor<T>,
    pub records: Vec<FeatureMapRecord<T>>,
    /// Batch statistics per batch-norm layer (training mode only).
    pub batch_stats: Vec<(usize, BatchStats<T>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnetSpec {
    pub levels: usize,
    pub init_filters: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub norm: NormKind,
}

/// Filters at each level: doubling from `init_filters`, capped at [`FILTER_CAP`].
pub fn level_filters(levels: usize, init_filters: usize) -> Vec<usize> {
    (0..levels)
        .map(|v| init_filters.saturating_mul(1usize.checked_shl(v as u32).unwrap_or(usize::MAX)).min(FILTER_CAP))
        .collect()
}

#[derive(Debug, Clone)]
pub struct NetworkGraph<T: Scalar> {
    pub spec: UnetSpec,
    layers: Vec<PrunableConvLayer<T>>,
}

struct LayerPlan {
    name: String,
    kind: LayerKind,
    kernel: usize,
    stride: usize,
    padding: usize,
    out: usize,
    norm: NormKind,
    activation: Activation,
    prunable: bool,
    inputs: Vec<Source>,
}

impl<T: Scalar> NetworkGraph<T> {
    /// Builds the U-Net: two 3x3 conv blocks per encoder level (the first of
    /// every level below the top downsamples with stride 2), a 2x2 stride-2
    /// transposed conv plus two conv blocks per decoder level, and a 1x1
    /// classifier. Decoder blocks consume `[upsampled, skip]`.
    pub fn build_unet(spec: UnetSpec, seed: u64) -> Result<Self> {
        if spec.levels < 2 {
            return Err(NetworkError::Architecture(format!("need at least 2 levels, got {}", spec.levels)));
        }
        if spec.init_filters < 2 {
            return Err(NetworkError::Architecture(format!("need at least 2 initial filters, got {}", spec.init_filters)));
        }
        if spec.num_classes < 2 {
            return Err(NetworkError::Architecture(format!("need at least 2 classes, got {}", spec.num_classes)));
        }
        if spec.in_channels == 0 {
            return Err(NetworkError::Architecture("input must have channels".into()));
        }
        let filters = level_filters(spec.levels, spec.init_filters);
        let block = |name: String, out, stride, inputs| LayerPlan {
            name,
            kind: LayerKind::Conv,
            kernel: 3,
            stride,
            padding: 1,
            out,
            norm: spec.norm,
            activation: Activation::LeakyRelu,
            prunable: true,
            inputs,
        };
        let mut plans: Vec<LayerPlan> = Vec::new();
        let mut skips = Vec::new();
        let mut prev = Source::Input;
        for (v, &f) in filters.iter().enumerate() {
            let stride = if v == 0 { 1 } else { 2 };
            plans.push(block(format!("enc_conv_{}", 2 * v + 1), f, stride, vec![prev]));
            plans.push(block(format!("enc_conv_{}", 2 * v + 2), f, 1, vec![Source::Layer(plans.len() - 1)]));
            prev = Source::Layer(plans.len() - 1);
            skips.push(prev);
        }
        for j in 1..spec.levels {
            let v = spec.levels - 1 - j;
            plans.push(LayerPlan {
                name: format!("dec_trans_{j}"),
                kind: LayerKind::ConvTranspose,
                kernel: 2,
                stride: 2,
                padding: 0,
                out: filters[v],
                norm: NormKind::None,
                activation: Activation::None,
                prunable: true,
                inputs: vec![prev],
            });
            let up = Source::Layer(plans.len() - 1);
            plans.push(block(format!("dec_conv_{}", 2 * j - 1), filters[v], 1, vec![up, skips[v]]));
            plans.push(block(format!("dec_conv_{}", 2 * j), filters[v], 1, vec![Source::Layer(plans.len() - 1)]));
            prev = Source::Layer(plans.len() - 1);
        }
        plans.push(LayerPlan {
            name: "out_conv".into(),
            kind: LayerKind::Conv,
            kernel: 1,
            stride: 1,
            padding: 0,
            out: spec.num_classes,
            norm: NormKind::None,
            activation: Activation::None,
            prunable: false,
            inputs: vec![prev],
        });

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers: Vec<PrunableConvLayer<T>> = Vec::with_capacity(plans.len());
        for p in plans {
            let c_in: usize = p
                .inputs
                .iter()
                .map(|s| match s {
                    Source::Input => spec.in_channels,
                    Source::Layer(i) => layers[*i].out_channels(),
                })
                .sum();
            let fan_in = (c_in * p.kernel * p.kernel) as f64;
            let gain = match p.activation {
                Activation::LeakyRelu => (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt(),
                Activation::Relu => 2f64.sqrt(),
                Activation::None => 1.0,
            };
            let normal = Normal::new(0.0, gain / fan_in.sqrt()).expect("positive std");
            let n = p.out * c_in * p.kernel * p.kernel;
            let w: Vec<T> = (0..n).map(|_| T::from_f64_lossy(normal.sample(&mut rng))).collect();
            let affine = match p.norm {
                NormKind::None => None,
                _ => Some((Param::new(vec![T::one(); p.out], [p.out])?, Param::new(vec![T::zero(); p.out], [p.out])?)),
            };
            let running = (p.norm == NormKind::Batch)
                .then(|| RunningStats { mean: vec![T::zero(); p.out], var: vec![T::one(); p.out] });
            layers.push(PrunableConvLayer {
                name: p.name,
                kind: p.kind,
                kernel: p.kernel,
                stride: p.stride,
                padding: p.padding,
                weight: Param::new(w, [p.out, c_in, p.kernel, p.kernel])?,
                bias: Param::new(vec![T::zero(); p.out], [p.out])?,
                norm: p.norm,
                affine,
                running,
                activation: p.activation,
                prunable: p.prunable,
                inputs: p.inputs,
                channel_ids: (0..p.out).collect(),
            });
        }
        let net = NetworkGraph { spec, layers };
        net.audit()?;
        Ok(net)
    }

    /// Assembles a graph from explicit layers (checkpoint loading, tests).
    pub fn from_layers(spec: UnetSpec, layers: Vec<PrunableConvLayer<T>>) -> Result<Self> {
        let net = NetworkGraph { spec, layers };
        net.audit()?;
        Ok(net)
    }

    pub fn layers(&self) -> &[PrunableConvLayer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [PrunableConvLayer<T>] {
        &mut self.layers
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| NetworkError::UnknownLayer(name.to_string()))
    }

    pub fn layer(&self, name: &str) -> Result<&PrunableConvLayer<T>> {
        Ok(&self.layers[self.layer_index(name)?])
    }

    pub fn prunable_indices(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].prunable).collect()
    }

    /// Sum of live output channels over prunable layers.
    pub fn live_filters(&self) -> usize {
        self.layers.iter().filter(|l| l.prunable).map(PrunableConvLayer::out_channels).sum()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(PrunableConvLayer::params_mut).collect()
    }

    fn source_channels(&self, s: Source) -> usize {
        match s {
            Source::Input => self.spec.in_channels,
            Source::Layer(i) => self.layers[i].out_channels(),
        }
    }

    /// Indices of layers that consume `producer`, with the channel offset at
    /// which its outputs start in each consumer's input.
    pub fn consumers(&self, producer: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (ci, layer) in self.layers.iter().enumerate() {
            let mut offset = 0;
            for &s in &layer.inputs {
                if s == Source::Layer(producer) {
                    out.push((ci, offset));
                }
                offset += self.source_channels(s);
            }
        }
        out
    }

    /// Full-graph channel consistency check.
    pub fn audit(&self) -> Result<()> {
        let fail = |layer: &PrunableConvLayer<T>, msg: String| NetworkError::Audit { layer: layer.name.clone(), msg };
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.inputs.is_empty() {
                return Err(fail(layer, "no inputs".into()));
            }
            for s in &layer.inputs {
                if let Source::Layer(p) = s {
                    if *p >= i {
                        return Err(fail(layer, format!("consumes later layer {p}")));
                    }
                }
            }
            let expected: usize = layer.inputs.iter().map(|&s| self.source_channels(s)).sum();
            let [o, c, k1, k2] = match *layer.weight.shape() {
                [a, b, c, d] => [a, b, c, d],
                ref s => return Err(fail(layer, format!("weight shape {s:?}"))),
            };
            if c != expected {
                return Err(fail(layer, format!("weight expects {c} input channels, producers supply {expected}")));
            }
            if o == 0 || c == 0 {
                return Err(fail(layer, "empty channel dimension".into()));
            }
            if (k1, k2) != (layer.kernel, layer.kernel) {
                return Err(fail(layer, format!("kernel {k1}x{k2} != {}", layer.kernel)));
            }
            if layer.bias.shape() != [o] || layer.channel_ids.len() != o {
                return Err(fail(layer, "bias or channel ids out of sync with weights".into()));
            }
            if let Some((g, b)) = &layer.affine {
                if g.shape() != [o] || b.shape() != [o] {
                    return Err(fail(layer, "affine parameters out of sync".into()));
                }
            }
            if (layer.norm == NormKind::None) != layer.affine.is_none() {
                return Err(fail(layer, "affine parameters do not match norm kind".into()));
            }
            if let Some(r) = &layer.running {
                if r.mean.len() != o || r.var.len() != o {
                    return Err(fail(layer, "running stats out of sync".into()));
                }
            }
        }
        match self.layers.last() {
            Some(last) if !last.prunable && last.out_channels() == self.spec.num_classes => Ok(()),
            Some(last) => Err(fail(last, "classifier must be non-prunable with one channel per class".into())),
            None => Err(NetworkError::Architecture("empty network".into())),
        }
    }

    /// Checks an input shape and returns the spatial size.
    pub fn check_input(&self, shape: &[usize]) -> Result<(usize, usize)> {
        let [_, c, h, w] = match *shape {
            [b, c, h, w] => [b, c, h, w],
            _ => return Err(NetworkError::Architecture(format!("input must be 4-D, got {shape:?}"))),
        };
        if c != self.spec.in_channels {
            return Err(NetworkError::InputChannels { got: c, want: self.spec.in_channels });
        }
        let factor = 1usize << (self.spec.levels - 1);
        if h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
            return Err(NetworkError::Indivisible { h, w, factor });
        }
        Ok((h, w))
    }

    /// Runs the network. With `capture`, returns one record per prunable layer.
    pub fn forward(&self, batch: &Tensor<T>, capture: bool, mode: Mode) -> Result<ForwardPass<T>> {
        self.check_input(batch.shape())?;
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(self.layers.len());
        let mut records = Vec::new();
        let mut batch_stats = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let parts: Vec<Tensor<T>> = layer
                .inputs
                .iter()
                .map(|s| match s {
                    Source::Input => batch.clone(),
                    Source::Layer(j) => outputs[*j].clone(),
                })
                .collect();
            let x = if parts.len() == 1 { parts[0].clone() } else { Tensor::concat_channels(&parts)? };
            let (y, stats) = layer.forward(&x, mode)?;
            if let Some(s) = stats {
                batch_stats.push((i, s));
            }
            if capture && layer.prunable {
                records.push(FeatureMapRecord { layer: layer.name.clone(), layer_index: i, epoch: 0, output: y.clone() });
            }
            outputs.push(y);
        }
        let logits = outputs.pop().expect("network has layers");
        Ok(ForwardPass { logits, records, batch_stats })
    }

    /// Folds batch statistics from a training pass into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[(usize, BatchStats<T>)]) {
        let m = T::from_f64_lossy(BN_MOMENTUM);
        for (i, s) in stats {
            let n = T::from_usize(s.count.max(2)).unwrap();
            let unbias = n / (n - T::one());
            if let Some(r) = &mut self.layers[*i].running {
                for c in 0..r.mean.len() {
                    r.mean[c] = (T::one() - m) * r.mean[c] + m * s.mean[c];
                    r.var[c] = (T::one() - m) * r.var[c] + m * s.var[c] * unbias;
                }
            }
        }
    }

    /// Removes output filters `indices` (live positions) of layer `name`,
    /// and the matching input slices of every consumer.
    pub fn remove_filters(&mut self, name: &str, indices: &BTreeSet<usize>) -> Result<()> {
        let li = self.layer_index(name)?;
        self.remove_filters_at(li, indices)
    }

    pub fn remove_filters_at(&mut self, li: usize, indices: &BTreeSet<usize>) -> Result<()> {
        if indices.is_empty() {
            return Ok(());
        }
        let layer = &self.layers[li];
        if !layer.prunable {
            return Err(NetworkError::NotPrunable(layer.name.clone()));
        }
        let live = layer.out_channels();
        if let Some(&bad) = indices.iter().find(|&&i| i >= live) {
            return Err(NetworkError::ChannelOutOfRange { layer: layer.name.clone(), index: bad, live });
        }
        if indices.len() >= live {
            return Err(NetworkError::WouldEmpty { layer: layer.name.clone(), removing: indices.len(), live });
        }
        let keep: Vec<usize> = (0..live).filter(|i| !indices.contains(i)).collect();
        // consumers first: their offsets depend on the producer's current width
        for (ci, offset) in self.consumers(li) {
            let width = self.layers[ci].in_channels();
            let keep_in: Vec<usize> = (0..width)
                .filter(|&c| !(c >= offset && c < offset + live && indices.contains(&(c - offset))))
                .collect();
            self.layers[ci].weight.select(1, &keep_in)?;
        }
        self.layers[li].keep_outputs(&keep)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(levels: usize, init_filters: usize) -> UnetSpec {
        UnetSpec { levels, init_filters, in_channels: 1, num_classes: 3, norm: NormKind::Instance }
    }

    #[test]
    fn five_level_layout_has_22_named_prunable_layers() {
        assert_eq!(level_filters(5, 32), vec![32, 64, 128, 256, 480]);
        let net = NetworkGraph::<f32>::build_unet(spec(5, 32), 0).unwrap();
        let names: Vec<&str> = net.layers().iter().filter(|l| l.prunable).map(|l| l.name.as_str()).collect();
        assert_eq!(names.len(), 22);
        let mut want: Vec<String> = (1..=10).map(|i| format!("enc_conv_{i}")).collect();
        for j in 1..=4 {
            want.push(format!("dec_trans_{j}"));
            want.push(format!("dec_conv_{}", 2 * j - 1));
            want.push(format!("dec_conv_{}", 2 * j));
        }
        let mut sorted_names: Vec<&str> = names.clone();
        sorted_names.sort();
        want.sort();
        assert_eq!(sorted_names, want.iter().map(String::as_str).collect::<Vec<_>>());
        // decoder widths mirror the encoder level they return to
        assert_eq!(net.layer("dec_trans_1").unwrap().out_channels(), 256);
        assert_eq!(net.layer("dec_conv_8").unwrap().out_channels(), 32);
        assert!(!net.layers().last().unwrap().prunable);
    }

    #[test]
    fn filter_doubling_and_cap() {
        assert_eq!(level_filters(3, 8), vec![8, 16, 32]);
        assert_eq!(level_filters(2, 480), vec![480, 480]);
        assert_eq!(level_filters(7, 48), vec![48, 96, 192, 384, 480, 480, 480]);
    }

    #[test]
    fn build_rejects_bad_specs() {
        assert!(NetworkGraph::<f64>::build_unet(UnetSpec { num_classes: 1, ..spec(3, 8) }, 0).is_err());
        assert!(NetworkGraph::<f64>::build_unet(spec(1, 8), 0).is_err());
        assert!(NetworkGraph::<f64>::build_unet(spec(3, 1), 0).is_err());
    }

    #[test]
    fn forward_shapes_and_records() {
        let net = NetworkGraph::<f64>::build_unet(spec(3, 4), 1).unwrap();
        let x = Tensor::<f64>::from_f64(&vec![0.1; 2 * 32 * 32], [2, 1, 32, 32]).unwrap();
        let pass = net.forward(&x, true, Mode::Train).unwrap();
        assert_eq!(pass.logits.shape(), &[2, 3, 32, 32]);
        assert_eq!(pass.records.len(), net.prunable_indices().len());
        for r in &pass.records {
            assert_eq!(r.channels(), net.layers()[r.layer_index].out_channels());
        }
        let bad = Tensor::<f64>::zeros([1, 1, 30, 32]);
        assert!(matches!(net.forward(&bad, false, Mode::Eval), Err(NetworkError::Indivisible { .. })));
        let bad = Tensor::<f64>::zeros([1, 2, 32, 32]);
        assert!(matches!(net.forward(&bad, false, Mode::Eval), Err(NetworkError::InputChannels { .. })));
    }

    #[test]
    fn zero_weights_leave_only_the_classifier_bias() {
        let mut net = NetworkGraph::<f64>::build_unet(spec(2, 2), 3).unwrap();
        for layer in net.layers_mut() {
            let n = layer.weight.value().numel();
            layer.weight.assign(vec![0.0; n]).unwrap();
        }
        let last = net.layers_mut().last_mut().unwrap();
        last.bias.assign(vec![0.5, -1.0, 2.0]).unwrap();
        let x = Tensor::<f64>::from_f64(&(0..16).map(f64::from).collect::<Vec<_>>(), [1, 1, 4, 4]).unwrap();
        let logits = net.forward(&x, false, Mode::Eval).unwrap().logits;
        for (c, want) in [0.5, -1.0, 2.0].iter().enumerate() {
            assert!(logits.data()[c * 16..(c + 1) * 16].iter().all(|v| v == want));
        }
    }

    #[test]
    fn pruning_cascades_through_skip_connections() {
        let mut net = NetworkGraph::<f64>::build_unet(spec(3, 8), 2).unwrap();
        let direct = net.layer_index("enc_conv_3").unwrap();
        let skip_fed = net.layer_index("dec_conv_3").unwrap();
        let (d0, s0) = (net.layers()[direct].in_channels(), net.layers()[skip_fed].in_channels());
        net.remove_filters("enc_conv_2", &BTreeSet::from([1, 5])).unwrap();
        assert_eq!(net.layer("enc_conv_2").unwrap().out_channels(), 6);
        assert_eq!(net.layers()[direct].in_channels(), d0 - 2);
        assert_eq!(net.layers()[skip_fed].in_channels(), s0 - 2);
        assert_eq!(net.layer("enc_conv_2").unwrap().channel_ids, vec![0, 2, 3, 4, 6, 7]);
        net.audit().unwrap();
        let x = Tensor::<f64>::zeros([1, 1, 16, 16]);
        net.forward(&x, true, Mode::Train).unwrap();
    }

    #[test]
    fn skip_slices_removed_are_the_matching_ones() {
        let mut net = NetworkGraph::<f64>::build_unet(spec(2, 4), 9).unwrap();
        let dec = net.layer_index("dec_conv_1").unwrap();
        // dec_conv_1 input = [dec_trans_1 (4), enc_conv_2 (4)]
        let before = net.layers()[dec].weight.value().to_vec();
        net.remove_filters("enc_conv_2", &BTreeSet::from([2])).unwrap();
        let after = net.layers()[dec].weight.value();
        assert_eq!(after.shape(), &[4, 7, 3, 3]);
        let kept_slots = [0, 1, 2, 3, 4, 5, 7];
        for o in 0..4 {
            for (new_c, &old_c) in kept_slots.iter().enumerate() {
                assert_eq!(
                    &after.data()[(o * 7 + new_c) * 9..][..9],
                    &before[(o * 8 + old_c) * 9..][..9]
                );
            }
        }
    }

    #[test]
    fn removal_errors() {
        let mut net = NetworkGraph::<f64>::build_unet(spec(2, 4), 0).unwrap();
        let snapshot = net.layers().iter().map(|l| l.weight.shape().to_vec()).collect::<Vec<_>>();
        assert!(matches!(
            net.remove_filters("enc_conv_1", &BTreeSet::from([0, 1, 2, 3])),
            Err(NetworkError::WouldEmpty { .. })
        ));
        assert!(matches!(net.remove_filters("out_conv", &BTreeSet::from([0])), Err(NetworkError::NotPrunable(_))));
        assert!(matches!(
            net.remove_filters("enc_conv_1", &BTreeSet::from([9])),
            Err(NetworkError::ChannelOutOfRange { .. })
        ));
        net.remove_filters("enc_conv_1", &BTreeSet::new()).unwrap();
        let after = net.layers().iter().map(|l| l.weight.shape().to_vec()).collect::<Vec<_>>();
        assert_eq!(snapshot, after);
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let mut net = NetworkGraph::<f64>::build_unet(UnetSpec { norm: NormKind::Batch, ..spec(2, 2) }, 4).unwrap();
        let x = Tensor::<f64>::from_f64(&(0..32).map(|v| v as f64 / 7.0).collect::<Vec<_>>(), [2, 1, 4, 4]).unwrap();
        let pass = net.forward(&x, false, Mode::Train).unwrap();
        assert_eq!(pass.batch_stats.len(), 6);
        net.update_running_stats(&pass.batch_stats);
        let r = net.layers()[0].running.as_ref().unwrap();
        assert!(r.mean.iter().any(|m| *m != 0.0));
        net.forward(&x, false, Mode::Eval).unwrap();
    }
}
