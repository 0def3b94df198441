//! Instance and batch normalization plus the per-channel affine transform.

use super::{BackwardOp, Result, Tensor, TensorError};
use crate::scalar::Scalar;

pub const DEFAULT_NORM_EPS: f64 = 1e-5;

/// Standardization over equally sized groups of elements.
struct NormOp<T> {
    inv_std: Vec<T>,
    layout: Layout,
}

#[derive(Clone, Copy)]
enum Layout {
    /// One group per (sample, channel) plane.
    Instance { planes: usize, plane: usize },
    /// One group per channel spanning all samples.
    Batch { batch: usize, channels: usize, plane: usize },
}

impl Layout {
    fn groups(&self) -> usize {
        match *self {
            Layout::Instance { planes, .. } => planes,
            Layout::Batch { channels, .. } => channels,
        }
    }

    fn group_len(&self) -> usize {
        match *self {
            Layout::Instance { plane, .. } => plane,
            Layout::Batch { batch, plane, .. } => batch * plane,
        }
    }

    /// Calls `f(group, flat_index)` for every element in a fixed order.
    fn for_each_in_group(&self, group: usize, mut f: impl FnMut(usize)) {
        match *self {
            Layout::Instance { plane, .. } => (group * plane..(group + 1) * plane).for_each(f),
            Layout::Batch { batch, channels, plane } => {
                for b in 0..batch {
                    let start = (b * channels + group) * plane;
                    (start..start + plane).for_each(&mut f);
                }
            }
        }
    }
}

impl<T: Scalar> BackwardOp<T> for NormOp<T> {
    fn name(&self) -> &'static str {
        match self.layout {
            Layout::Instance { .. } => "instance_norm",
            Layout::Batch { .. } => "batch_norm",
        }
    }

    fn backward(&self, p: &[Tensor<T>], y: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let n = T::from_usize(self.layout.group_len()).unwrap();
        let mut dx = vec![T::zero(); p[0].numel()];
        for g in 0..self.layout.groups() {
            let (mut sum_dy, mut sum_dy_y) = (T::zero(), T::zero());
            self.layout.for_each_in_group(g, |i| {
                sum_dy += grad[i];
                sum_dy_y += grad[i] * y[i];
            });
            let scale = self.inv_std[g] / n;
            self.layout.for_each_in_group(g, |i| {
                dx[i] = scale * (n * grad[i] - sum_dy - y[i] * sum_dy_y);
            });
        }
        vec![Some(dx)]
    }
}

/// Per-channel statistics of a batch-norm forward pass (biased variance).
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Elements per channel the statistics were taken over.
    pub count: usize,
}

fn normalize<T: Scalar>(x: &Tensor<T>, layout: Layout, eps: T) -> Result<(Tensor<T>, BatchStats<T>)> {
    let data = x.data();
    let n = T::from_usize(layout.group_len()).unwrap();
    let mut out = vec![T::zero(); data.len()];
    let mut inv_std = Vec::with_capacity(layout.groups());
    let mut stats = BatchStats { mean: Vec::new(), var: Vec::new(), count: layout.group_len() };
    for g in 0..layout.groups() {
        let mut mean = T::zero();
        layout.for_each_in_group(g, |i| mean += data[i]);
        mean /= n;
        let mut var = T::zero();
        layout.for_each_in_group(g, |i| {
            let d = data[i] - mean;
            var += d * d;
        });
        var /= n;
        let is = T::one() / (var + eps).sqrt();
        layout.for_each_in_group(g, |i| out[i] = (data[i] - mean) * is);
        inv_std.push(is);
        stats.mean.push(mean);
        stats.var.push(var);
    }
    let t = Tensor::from_op(out, x.shape().to_vec(), vec![x.clone()], NormOp { inv_std, layout })?;
    Ok((t, stats))
}

struct AffineOp {
    channels: usize,
    plane: usize,
}

impl<T: Scalar> BackwardOp<T> for AffineOp {
    fn name(&self) -> &'static str {
        "channel_affine"
    }
    fn backward(&self, p: &[Tensor<T>], _: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (x, gamma) = (p[0].data(), p[1].data());
        let mut dx = vec![T::zero(); x.len()];
        let mut dg = vec![T::zero(); self.channels];
        let mut db = vec![T::zero(); self.channels];
        for (pi, (gchunk, xchunk)) in grad.chunks(self.plane).zip(x.chunks(self.plane)).enumerate() {
            let c = pi % self.channels;
            let dst = &mut dx[pi * self.plane..(pi + 1) * self.plane];
            for ((d, g), xv) in dst.iter_mut().zip(gchunk).zip(xchunk) {
                *d = *g * gamma[c];
                dg[c] += *g * *xv;
                db[c] += *g;
            }
        }
        vec![Some(dx), Some(dg), Some(db)]
    }
}

impl<T: Scalar> Tensor<T> {
    /// Normalizes every `(sample, channel)` plane to zero mean, unit variance.
    pub fn instance_norm(&self, eps: T) -> Result<Tensor<T>> {
        let [b, c, h, w] = self.dims4("instance_norm")?;
        normalize(self, Layout::Instance { planes: b * c, plane: h * w }, eps).map(|(t, _)| t)
    }

    /// Normalizes every channel over batch and space using batch statistics.
    pub fn batch_norm(&self, eps: T) -> Result<(Tensor<T>, BatchStats<T>)> {
        let [b, c, h, w] = self.dims4("batch_norm")?;
        normalize(self, Layout::Batch { batch: b, channels: c, plane: h * w }, eps)
    }

    /// `y[b, c] = x[b, c] * gamma[c] + beta[c]`.
    pub fn channel_affine(&self, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
        let [_, c, h, w] = self.dims4("channel_affine")?;
        for p in [gamma, beta] {
            if p.shape() != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: "channel_affine",
                    lhs: self.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let plane = h * w;
        let (g, bt) = (gamma.data(), beta.data());
        let mut y = self.data().to_vec();
        for (pi, chunk) in y.chunks_mut(plane).enumerate() {
            let ch = pi % c;
            chunk.iter_mut().for_each(|v| *v = *v * g[ch] + bt[ch]);
        }
        Tensor::from_op(y, self.shape().to_vec(), vec![self.clone(), gamma.clone(), beta.clone()], AffineOp { channels: c, plane })
    }
}
