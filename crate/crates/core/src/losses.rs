//! Segmentation losses and the channel-distance regularizer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::segnet::FeatureMapRecord;
use crate::tensor::{BackwardOp, Tensor, TensorError};

/// Smoothing term of the Dice loss.
pub const DICE_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("channel-distance term needs at least one feature-map record")]
    NoRecords,
    #[error("invalid loss config: {0}")]
    Config(String),
    #[error("label {label} at position {index} is outside 0..{classes}")]
    LabelOutOfRange { label: usize, index: usize, classes: usize },
    #[error("{0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaNormMode {
    /// Min-max normalize each channel map to [0, 1] before pooling.
    #[default]
    MinmaxFeatureMaps,
    /// Pool raw maps, then divide each layer's distances by their maximum.
    DivideByMaxDistance,
    /// Raw pooled distances.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub lambda: f64,
    pub omega: usize,
    #[serde(default)]
    pub delta_norm_mode: DeltaNormMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda: 0.5, omega: 2, delta_norm_mode: DeltaNormMode::MinmaxFeatureMaps }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(LossError::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.omega == 0 {
            return Err(LossError::Config("omega must be >= 1".into()));
        }
        Ok(())
    }
}

/// `(x - min) / (max - min)`; a constant map becomes all zeros.
pub fn minmax_normalize<T: Scalar>(map: &[T]) -> Vec<T> {
    let (lo, hi) = min_max(map);
    if hi == lo {
        return vec![T::zero(); map.len()];
    }
    let range = hi - lo;
    map.iter().map(|&v| (v - lo) / range).collect()
}

/// Positions of the first minimum and first maximum.
fn arg_min_max<T: Scalar>(xs: &[T]) -> (usize, usize) {
    let (mut lo, mut hi) = (0, 0);
    for (i, &v) in xs.iter().enumerate() {
        if v < xs[lo] {
            lo = i;
        }
        if v > xs[hi] {
            hi = i;
        }
    }
    (lo, hi)
}

fn min_max<T: Scalar>(xs: &[T]) -> (T, T) {
    if xs.is_empty() {
        return (T::zero(), T::zero());
    }
    let (lo, hi) = arg_min_max(xs);
    (xs[lo], xs[hi])
}

struct MinmaxOp {
    plane: usize,
}

impl<T: Scalar> BackwardOp<T> for MinmaxOp {
    fn name(&self) -> &'static str {
        "minmax_normalize"
    }

    fn backward(&self, p: &[Tensor<T>], y: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let x = p[0].data();
        let mut dx = vec![T::zero(); x.len()];
        for (pi, xs) in x.chunks(self.plane).enumerate() {
            let (lo, hi) = arg_min_max(xs);
            let range = xs[hi] - xs[lo];
            if range == T::zero() {
                continue;
            }
            let s = pi * self.plane;
            let (ys, gs) = (&y[s..s + self.plane], &grad[s..s + self.plane]);
            let (mut to_min, mut to_max) = (T::zero(), T::zero());
            for i in 0..self.plane {
                dx[s + i] = gs[i] / range;
                to_min += gs[i] * (ys[i] - T::one());
                to_max -= gs[i] * ys[i];
            }
            dx[s + lo] += to_min / range;
            dx[s + hi] += to_max / range;
        }
        vec![Some(dx)]
    }
}

/// Min-max normalizes every `(sample, channel)` plane of a `[B, C, H, W]` tensor.
pub fn minmax_normalize_channels<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, _, h, w] = x.dims4("minmax_normalize")?;
    let plane = h * w;
    let mut out = Vec::with_capacity(x.numel());
    for chunk in x.data().chunks(plane) {
        out.extend(minmax_normalize(chunk));
    }
    Ok(Tensor::from_op(out, x.shape().to_vec(), vec![x.clone()], MinmaxOp { plane })?)
}

struct RefDistanceOp {
    channels: usize,
    plane: usize,
    reference: usize,
}

impl<T: Scalar> BackwardOp<T> for RefDistanceOp {
    fn name(&self) -> &'static str {
        "reference_distances"
    }

    fn backward(&self, p: &[Tensor<T>], d: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let x = p[0].data();
        let (c, n, r0) = (self.channels, self.plane, self.reference);
        let mut dx = vec![T::zero(); x.len()];
        for b in 0..x.len() / (c * n) {
            let base = b * c * n;
            for (slot, r) in (0..c).filter(|&r| r != r0).enumerate() {
                let k = b * (c - 1) + slot;
                if d[k] == T::zero() {
                    continue;
                }
                let s = grad[k] / d[k];
                for i in 0..n {
                    let diff = s * (x[base + r * n + i] - x[base + r0 * n + i]);
                    dx[base + r * n + i] += diff;
                    dx[base + r0 * n + i] -= diff;
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Euclidean distance from channel `reference` to every other channel, per
/// sample. Returns `[B, C - 1]` with channels in their original order.
/// The gradient at a zero distance is taken as zero.
pub fn reference_distances<T: Scalar>(x: &Tensor<T>, reference: usize) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.dims4("reference_distances")?;
    if reference >= c {
        return Err(LossError::Shape(format!("reference channel {reference} out of range for {c} channels")));
    }
    let n = h * w;
    let data = x.data();
    let mut out = Vec::with_capacity(b * (c - 1));
    for bi in 0..b {
        let base = bi * c * n;
        let refm = &data[base + reference * n..base + (reference + 1) * n];
        for r in (0..c).filter(|&r| r != reference) {
            let m = &data[base + r * n..base + (r + 1) * n];
            out.push(refm.iter().zip(m).map(|(a, v)| (*v - *a) * (*v - *a)).sum::<T>().sqrt());
        }
    }
    Ok(Tensor::from_op(out, vec![b, c - 1], vec![x.clone()], RefDistanceOp { channels: c, plane: n, reference })?)
}

struct RowMaxOp {
    width: usize,
}

impl<T: Scalar> BackwardOp<T> for RowMaxOp {
    fn name(&self) -> &'static str {
        "row_max_normalize"
    }

    fn backward(&self, p: &[Tensor<T>], y: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let x = p[0].data();
        let mut dx = vec![T::zero(); x.len()];
        for (ri, row) in x.chunks(self.width).enumerate() {
            let (_, hi) = arg_min_max(row);
            let m = row[hi];
            if m == T::zero() {
                continue;
            }
            let s = ri * self.width;
            let mut through_max = T::zero();
            for i in 0..self.width {
                dx[s + i] = grad[s + i] / m;
                through_max -= grad[s + i] * y[s + i];
            }
            dx[s + hi] += through_max / m;
        }
        vec![Some(dx)]
    }
}

/// Divides each row of a non-negative `[R, N]` tensor by its maximum; an
/// all-zero row stays zero.
pub fn row_max_normalize<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let width = match *x.shape() {
        [_, n] => n,
        ref s => return Err(LossError::Shape(format!("row_max_normalize expects 2-D, got {s:?}"))),
    };
    let mut out = x.to_vec();
    if width > 0 {
        for row in out.chunks_mut(width) {
            let m = min_max(row).1;
            if m > T::zero() {
                row.iter_mut().for_each(|v| *v /= m);
            }
        }
    }
    Ok(Tensor::from_op(out, x.shape().to_vec(), vec![x.clone()], RowMaxOp { width })?)
}

/// Pooled per-channel view of a `[B, C, H, W]` map under `mode`:
/// min-max normalized before pooling in the default mode, raw otherwise.
pub fn pooled_view<T: Scalar>(x: &Tensor<T>, omega: usize, mode: DeltaNormMode) -> Result<Tensor<T>> {
    let base = match mode {
        DeltaNormMode::MinmaxFeatureMaps => minmax_normalize_channels(x)?,
        DeltaNormMode::DivideByMaxDistance | DeltaNormMode::None => x.clone(),
    };
    Ok(base.avg_pool2d(omega)?)
}

/// Layer-averaged, batch-averaged mean distance to the first channel.
///
/// Each layer contributes `(1/C) Σ_{r≥2} ‖v_1 − v_r‖`; single-channel
/// layers contribute zero but still count in the layer average.
pub fn delta_opt<T: Scalar>(records: &[FeatureMapRecord<T>], cfg: &LossConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    let mut total: Option<Tensor<T>> = None;
    for rec in records {
        let [b, c, _, _] = rec.output.dims4("delta_opt")?;
        if c == 0 || b == 0 {
            return Err(LossError::Shape(format!("record {} has an empty batch or channel axis", rec.layer)));
        }
        if c == 1 {
            continue;
        }
        let pooled = pooled_view(&rec.output, cfg.omega, cfg.delta_norm_mode)?;
        let mut d = reference_distances(&pooled, 0)?;
        if cfg.delta_norm_mode == DeltaNormMode::DivideByMaxDistance {
            d = row_max_normalize(&d)?;
        }
        let term = d.sum()?.scale(T::from_f64_lossy(1.0 / (c * b) as f64))?;
        total = Some(match total {
            None => term,
            Some(t) => t.add(&term)?,
        });
    }
    if records.is_empty() {
        return Err(LossError::NoRecords);
    }
    let sum = match total {
        Some(t) => t,
        None => Tensor::scalar(T::zero())?,
    };
    Ok(sum.scale(T::from_f64_lossy(1.0 / records.len() as f64))?)
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().position(|&l| l >= classes) {
        Some(index) => Err(LossError::LabelOutOfRange { label: labels[index], index, classes }),
        None => Ok(()),
    }
}

/// One-hot `[B, C, H, W]` target from `[B, H, W]` labels in row-major order.
pub fn one_hot<T: Scalar>(labels: &[usize], batch: usize, classes: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    if labels.len() != batch * h * w {
        return Err(LossError::Shape(format!("{} labels for a {batch}x{h}x{w} batch", labels.len())));
    }
    check_labels(labels, classes)?;
    let plane = h * w;
    let mut out = vec![T::zero(); batch * classes * plane];
    for (i, &l) in labels.iter().enumerate() {
        let (b, p) = (i / plane, i % plane);
        out[(b * classes + l) * plane + p] = T::one();
    }
    Ok(Tensor::new(out, [batch, classes, h, w])?)
}

struct CrossEntropyOp<T> {
    probs: Vec<T>,
    labels: Vec<usize>,
    classes: usize,
    plane: usize,
}

impl<T: Scalar> BackwardOp<T> for CrossEntropyOp<T> {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, _: &[Tensor<T>], _: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let scale = grad[0] / T::from_usize(self.labels.len()).unwrap();
        let mut dx: Vec<T> = self.probs.iter().map(|&p| p * scale).collect();
        for (i, &l) in self.labels.iter().enumerate() {
            let (b, p) = (i / self.plane, i % self.plane);
            dx[(b * self.classes + l) * self.plane + p] -= scale;
        }
        vec![Some(dx)]
    }
}

/// Mean negative log-softmax of the true class over all pixels.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let [b, c, h, w] = logits.dims4("cross_entropy")?;
    let plane = h * w;
    if labels.len() != b * plane {
        return Err(LossError::Shape(format!("{} labels for logits {:?}", labels.len(), logits.shape())));
    }
    check_labels(labels, c)?;
    let x = logits.data();
    let mut probs = vec![T::zero(); x.len()];
    let mut nll = T::zero();
    for bi in 0..b {
        for p in 0..plane {
            let at = |k: usize| (bi * c + k) * plane + p;
            let m = (0..c).map(|k| x[at(k)]).fold(T::neg_infinity(), T::max);
            let z: T = (0..c).map(|k| (x[at(k)] - m).exp()).sum();
            for k in 0..c {
                probs[at(k)] = (x[at(k)] - m).exp() / z;
            }
            nll += z.ln() + m - x[at(labels[bi * plane + p])];
        }
    }
    let loss = nll / T::from_usize(labels.len()).unwrap();
    Ok(Tensor::from_op(
        vec![loss],
        Vec::new(),
        vec![logits.clone()],
        CrossEntropyOp { probs, labels: labels.to_vec(), classes: c, plane },
    )?)
}

struct DiceOp<T> {
    /// Per class: `2·Σpt + ε` and `Σp + Σt + ε`.
    num: Vec<T>,
    den: Vec<T>,
    target: Vec<T>,
    classes: usize,
    plane: usize,
}

impl<T: Scalar> BackwardOp<T> for DiceOp<T> {
    fn name(&self) -> &'static str {
        "dice_loss"
    }

    fn backward(&self, _: &[Tensor<T>], _: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let k = -grad[0] / T::from_usize(self.classes).unwrap();
        let two = T::from_f64_lossy(2.0);
        let mut dp = vec![T::zero(); self.target.len()];
        for (pi, (d, t)) in dp.chunks_mut(self.plane).zip(self.target.chunks(self.plane)).enumerate() {
            let c = pi % self.classes;
            let den2 = self.den[c] * self.den[c];
            for (dv, tv) in d.iter_mut().zip(t) {
                *dv = k * (two * *tv * self.den[c] - self.num[c]) / den2;
            }
        }
        vec![Some(dp)]
    }
}

/// `1 − mean_c (2·Σ p·t + ε) / (Σ p + Σ t + ε)` with sums over batch and space.
pub fn dice_loss<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    if probs.shape() != target.shape() {
        return Err(LossError::Tensor(TensorError::ShapeMismatch {
            op: "dice_loss",
            lhs: probs.shape().to_vec(),
            rhs: target.shape().to_vec(),
        }));
    }
    let [_, c, h, w] = probs.dims4("dice_loss")?;
    let plane = h * w;
    let eps = T::from_f64_lossy(DICE_EPS);
    let two = T::from_f64_lossy(2.0);
    let mut inter = vec![T::zero(); c];
    let mut sums = vec![T::zero(); c];
    for (pi, (p, t)) in probs.data().chunks(plane).zip(target.data().chunks(plane)).enumerate() {
        let k = pi % c;
        for (pv, tv) in p.iter().zip(t) {
            inter[k] += *pv * *tv;
            sums[k] += *pv + *tv;
        }
    }
    let num: Vec<T> = inter.iter().map(|&i| two * i + eps).collect();
    let den: Vec<T> = sums.iter().map(|&s| s + eps).collect();
    let mean_dice = num.iter().zip(&den).map(|(n, d)| *n / *d).sum::<T>() / T::from_usize(c).unwrap();
    Ok(Tensor::from_op(
        vec![T::one() - mean_dice],
        Vec::new(),
        vec![probs.clone()],
        DiceOp { num, den, target: target.to_vec(), classes: c, plane },
    )?)
}

/// `ce + dice + λ·dopt`; with `λ = 0` the regularizer is left out of the graph.
pub fn total_loss<T: Scalar>(ce: &Tensor<T>, dice: &Tensor<T>, dopt: Option<&Tensor<T>>, lambda: f64) -> Result<Tensor<T>> {
    let base = ce.add(dice)?;
    match dopt {
        Some(d) if lambda != 0.0 => Ok(base.add(&d.scale(T::from_f64_lossy(lambda))?)?),
        _ => Ok(base),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;

    fn record(data: &[f64], shape: [usize; 4]) -> FeatureMapRecord<f64> {
        FeatureMapRecord {
            layer: "l".into(),
            layer_index: 0,
            epoch: 0,
            output: Tensor::param(data.to_vec(), shape).unwrap(),
        }
    }

    #[test]
    fn minmax_examples() {
        assert_eq!(minmax_normalize(&[4.0, 4.0, 4.0]), vec![0.0; 3]);
        assert_eq!(minmax_normalize(&[0.0, 1.0, 2.0, 3.0]), vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
        assert_eq!(minmax_normalize(&[0.0, 0.4, 1.0, 0.2]), vec![0.0, 0.4, 1.0, 0.2]);
    }

    #[test]
    fn delta_opt_two_channel_example() {
        let r = record(&[0., 0., 0., 1., 1., 1., 1., 0.], [1, 2, 2, 2]);
        let d = delta_opt(&[r], &LossConfig::default()).unwrap();
        assert!((d.item() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn delta_opt_zero_for_identical_channels_and_single_channel_layers() {
        let same = record(&[0.3, 0.9, 0.1, 0.5, 0.3, 0.9, 0.1, 0.5], [1, 2, 2, 2]);
        let single = record(&[1.0, 2.0, 3.0, 4.0], [1, 1, 2, 2]);
        for mode in [DeltaNormMode::MinmaxFeatureMaps, DeltaNormMode::DivideByMaxDistance, DeltaNormMode::None] {
            let cfg = LossConfig { delta_norm_mode: mode, ..Default::default() };
            let d = delta_opt(&[same.clone(), single.clone()], &cfg).unwrap();
            assert_eq!(d.item(), 0.0);
        }
        assert!(matches!(delta_opt::<f64>(&[], &LossConfig::default()), Err(LossError::NoRecords)));
    }

    #[test]
    fn delta_opt_averages_layers_and_samples() {
        // sample 0 reproduces the 0.25 example, sample 1 has identical channels
        let r = record(&[0., 0., 0., 1., 1., 1., 1., 0., 2., 2., 2., 5., 2., 2., 2., 5.], [2, 2, 2, 2]);
        let single = record(&[1.0, 2.0, 3.0, 4.0], [1, 1, 2, 2]);
        let d = delta_opt(&[r, single], &LossConfig::default()).unwrap();
        assert!((d.item() - 0.25 / 2.0 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn raw_mode_matches_minmax_on_normalized_input() {
        let r = record(&[0., 0.5, 0.2, 1., 1., 0., 0.3, 0.6, 0.2, 0.8, 1., 0.], [1, 3, 2, 2]);
        let a = delta_opt(std::slice::from_ref(&r), &LossConfig::default()).unwrap().item();
        let b = delta_opt(&[r], &LossConfig { delta_norm_mode: DeltaNormMode::None, ..Default::default() }).unwrap().item();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn lambda_zero_removes_the_regularizer_gradient() {
        let r = record(&[0., 0., 0., 1., 1., 1., 1., 0.], [1, 2, 2, 2]);
        let dopt = delta_opt(std::slice::from_ref(&r), &LossConfig::default()).unwrap();
        let ce = Tensor::scalar(0.7).unwrap();
        let dice = Tensor::scalar(0.2).unwrap();
        let t = total_loss(&ce, &dice, Some(&dopt), 0.0).unwrap();
        assert!((t.item() - 0.9).abs() < 1e-15);
        assert!(backward(&t).unwrap().get(&r.output).is_none());
        let t = total_loss(&ce, &dice, Some(&dopt), 0.5).unwrap();
        assert!((t.item() - (0.9 + 0.125)).abs() < 1e-15);
        let z = Tensor::scalar(0.0).unwrap();
        assert_eq!(total_loss(&z, &z, Some(&z), 0.5).unwrap().item(), 0.0);
    }

    #[test]
    fn cross_entropy_examples() {
        let logits = Tensor::<f64>::from_f64(&[2.0, 0.0], [1, 2, 1, 1]).unwrap();
        let want = -(2f64.exp() / (2f64.exp() + 1.0)).ln();
        assert!((cross_entropy(&logits, &[0]).unwrap().item() - want).abs() < 1e-15);
        let uniform = Tensor::<f64>::zeros([2, 4, 1, 3]);
        let ce = cross_entropy(&uniform, &[0, 1, 2, 3, 3, 1]).unwrap().item();
        assert!((ce - 4f64.ln()).abs() < 1e-14);
        let confident = Tensor::<f64>::from_f64(&[800.0, 0.0], [1, 2, 1, 1]).unwrap();
        assert_eq!(cross_entropy(&confident, &[0]).unwrap().item(), 0.0);
        assert!(matches!(cross_entropy(&logits, &[2]), Err(LossError::LabelOutOfRange { label: 2, .. })));
    }

    #[test]
    fn dice_examples() {
        let t = one_hot::<f64>(&[1, 1, 0, 0], 1, 2, 2, 2).unwrap();
        assert!(dice_loss(&t, &t).unwrap().item() < 1e-5);
        let flipped = one_hot::<f64>(&[0, 0, 1, 1], 1, 2, 2, 2).unwrap();
        assert!((dice_loss(&flipped, &t).unwrap().item() - 1.0).abs() < 1e-5);
        let half = one_hot::<f64>(&[1, 0, 1, 0], 1, 2, 2, 2).unwrap();
        assert!((dice_loss(&half, &t).unwrap().item() - 0.5).abs() < 1e-5);
        let bad = Tensor::<f64>::zeros([1, 3, 2, 2]);
        assert!(dice_loss(&bad, &t).is_err());
    }

    #[test]
    fn minmax_gradient_ignores_constant_planes() {
        let x = Tensor::<f64>::param(vec![2.0; 4], [1, 1, 2, 2]).unwrap();
        let y = minmax_normalize_channels(&x).unwrap();
        let g = backward(&y.sum().unwrap()).unwrap();
        assert_eq!(g.get(&x).unwrap(), &[0.0; 4]);
    }
}
