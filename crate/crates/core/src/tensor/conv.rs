//! Convolution, transposed convolution and pooling.
//!
//! Convolutions lower to im2col + GEMM one sample at a time. Weight
//! gradients accumulate over the batch in sample order, so results are
//! reproducible bit for bit.

use super::{invalid, BackwardOp, Result, Tensor, TensorError};
use crate::scalar::Scalar;

/// Spatial output length of a convolution, `None` when the kernel does not fit.
pub fn conv_output_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    (stride > 0 && kernel > 0 && padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

/// Spatial output length of a transposed convolution: `(in - 1) * stride - 2 * padding + kernel`.
pub fn conv_transpose_output_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if input == 0 || stride == 0 || kernel == 0 {
        return None;
    }
    ((input - 1) * stride + kernel).checked_sub(2 * padding).filter(|&n| n > 0)
}

/// Geometry of a forward convolution from `[c, h, w]` to `[_, ho, wo]`.
#[derive(Debug, Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }
    fn cols(&self) -> usize {
        self.ho * self.wo
    }
    fn in_plane(&self) -> usize {
        self.c * self.h * self.w
    }
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `ox` whose input column `ox * stride + kj - pad` lies in `0..w`.
fn valid_cols(g: &Geom, kj: usize) -> std::ops::Range<usize> {
    let lo = g.pad.saturating_sub(kj).div_ceil(g.stride);
    let hi = if g.w + g.pad > kj { (g.w + g.pad - kj - 1) / g.stride + 1 } else { 0 };
    lo.min(g.wo)..hi.min(g.wo).max(lo.min(g.wo))
}

fn im2col<T: Scalar>(x: &[T], g: &Geom, cols: &mut [T]) {
    let n = g.cols();
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                let valid = valid_cols(g, kj);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    line[..valid.start].fill(T::zero());
                    line[valid.end..].fill(T::zero());
                    let first = valid.start * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        line[valid.clone()].copy_from_slice(&src[first..first + valid.len()]);
                    } else {
                        for (v, ix) in line[valid.clone()].iter_mut().zip((first..).step_by(g.stride)) {
                            *v = src[ix];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &Geom, dx: &mut [T]) {
    let n = g.cols();
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * n..(row + 1) * n];
                let valid = valid_cols(g, kj);
                if valid.is_empty() {
                    continue;
                }
                let first = valid.start * g.stride + kj - g.pad;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + iy as usize) * g.w..][..g.w];
                    let line = &src[oy * g.wo..][valid.clone()];
                    for (v, ix) in line.iter().zip((first..).step_by(g.stride)) {
                        dst[ix] += *v;
                    }
                }
            }
        }
    }
}

/// `y[b] = W * cols(x[b])`, weights `[o, c*k*k]`.
fn conv_forward<T: Scalar>(x: &[T], batch: usize, w: &[T], o: usize, g: &Geom) -> Vec<T> {
    let (rows, n) = (g.rows(), g.cols());
    let mut y = vec![T::zero(); batch * o * n];
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * n }];
    for b in 0..batch {
        let xb = &x[b * g.in_plane()..(b + 1) * g.in_plane()];
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        let yb = &mut y[b * o * n..(b + 1) * o * n];
        T::gemm(o, rows, n, T::one(), w, (rows as isize, 1), src, (n as isize, 1), T::zero(), yb);
    }
    y
}

/// Adjoint of [`conv_forward`] with respect to its input.
fn conv_input_grad<T: Scalar>(dy: &[T], batch: usize, w: &[T], o: usize, g: &Geom) -> Vec<T> {
    let (rows, n) = (g.rows(), g.cols());
    let mut dx = vec![T::zero(); batch * g.in_plane()];
    let mut cols = vec![T::zero(); rows * n];
    for b in 0..batch {
        let dyb = &dy[b * o * n..(b + 1) * o * n];
        let dxb = &mut dx[b * g.in_plane()..(b + 1) * g.in_plane()];
        if g.is_pointwise() {
            T::gemm(rows, o, n, T::one(), w, (1, rows as isize), dyb, (n as isize, 1), T::zero(), dxb);
        } else {
            T::gemm(rows, o, n, T::one(), w, (1, rows as isize), dyb, (n as isize, 1), T::zero(), &mut cols);
            col2im(&cols, g, dxb);
        }
    }
    dx
}

/// Gradient of [`conv_forward`] with respect to its weights, `[o, c*k*k]`.
fn conv_weight_grad<T: Scalar>(x: &[T], dy: &[T], batch: usize, o: usize, g: &Geom) -> Vec<T> {
    let (rows, n) = (g.rows(), g.cols());
    let mut dw = vec![T::zero(); o * rows];
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * n }];
    for b in 0..batch {
        let xb = &x[b * g.in_plane()..(b + 1) * g.in_plane()];
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        let dyb = &dy[b * o * n..(b + 1) * o * n];
        T::gemm(o, n, rows, T::one(), dyb, (n as isize, 1), src, (1, n as isize), T::one(), &mut dw);
    }
    dw
}

fn bias_grad<T: Scalar>(dy: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut db = vec![T::zero(); channels];
    for b in 0..batch {
        for (c, acc) in db.iter_mut().enumerate() {
            let start = (b * channels + c) * plane;
            *acc += dy[start..start + plane].iter().copied().sum::<T>();
        }
    }
    db
}

fn add_bias<T: Scalar>(y: &mut [T], bias: &[T], plane: usize) {
    for (i, chunk) in y.chunks_mut(plane).enumerate() {
        let b = bias[i % bias.len()];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

/// Swaps the two leading axes of a `[a, b, k, k]` weight array.
fn swap_leading<T: Scalar>(w: &[T], a: usize, b: usize, kk: usize) -> Vec<T> {
    let mut out = vec![T::zero(); w.len()];
    for i in 0..a {
        for j in 0..b {
            let src = (i * b + j) * kk;
            let dst = (j * a + i) * kk;
            out[dst..dst + kk].copy_from_slice(&w[src..src + kk]);
        }
    }
    out
}

struct Conv2dOp {
    g: Geom,
    batch: usize,
    out_channels: usize,
}

impl<T: Scalar> BackwardOp<T> for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn backward(&self, p: &[Tensor<T>], _: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (x, w) = (&p[0], &p[1]);
        let o = self.out_channels;
        let dx = x
            .requires_grad()
            .then(|| conv_input_grad(grad, self.batch, w.data(), o, &self.g));
        let dw = w
            .requires_grad()
            .then(|| conv_weight_grad(x.data(), grad, self.batch, o, &self.g));
        let mut out = vec![dx, dw];
        if let Some(bias) = p.get(2) {
            out.push(bias.requires_grad().then(|| bias_grad(grad, self.batch, o, self.g.cols())));
        }
        out
    }
}

/// Transposed convolution expressed through the adjoint of a forward
/// convolution: `g` describes the convolution that maps the transposed
/// conv's *output* back to its *input*.
struct ConvTranspose2dOp {
    g: Geom,
    batch: usize,
    in_channels: usize,
    out_channels: usize,
    kernel: Vec<usize>,
}

impl<T: Scalar> BackwardOp<T> for ConvTranspose2dOp {
    fn name(&self) -> &'static str {
        "conv_transpose2d"
    }
    fn backward(&self, p: &[Tensor<T>], _: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (x, w) = (&p[0], &p[1]);
        let kk = self.kernel[2] * self.kernel[3];
        let (ci, co) = (self.in_channels, self.out_channels);
        let dx = x.requires_grad().then(|| {
            let k = swap_leading(w.data(), co, ci, kk);
            conv_forward(grad, self.batch, &k, ci, &self.g)
        });
        let dw = w.requires_grad().then(|| {
            let dk = conv_weight_grad(grad, x.data(), self.batch, ci, &self.g);
            swap_leading(&dk, ci, co, kk)
        });
        let mut out = vec![dx, dw];
        if let Some(bias) = p.get(2) {
            out.push(bias.requires_grad().then(|| bias_grad(grad, self.batch, co, self.g.h * self.g.w)));
        }
        out
    }
}

fn check_bias<T: Scalar>(op: &'static str, bias: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [channels] {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: vec![channels],
                rhs: b.shape().to_vec(),
            });
        }
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    /// 2-D convolution. `weight` is `[C_out, C_in, k, k]`.
    pub fn conv2d(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>, stride: usize, padding: usize) -> Result<Tensor<T>> {
        const OP: &str = "conv2d";
        let [b, c, h, w] = self.dims4(OP)?;
        let [o, wc, kh, kw] = weight.dims4(OP)?;
        if wc != c {
            return Err(TensorError::ShapeMismatch { op: OP, lhs: self.shape().to_vec(), rhs: weight.shape().to_vec() });
        }
        if kh != kw || kh == 0 {
            return Err(invalid(OP, format!("kernel must be square and non-empty, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(invalid(OP, "stride must be at least 1"));
        }
        check_bias(OP, bias, o)?;
        let (Some(ho), Some(wo)) = (conv_output_len(h, kh, stride, padding), conv_output_len(w, kh, stride, padding)) else {
            return Err(invalid(OP, format!("kernel {kh} does not fit input {h}x{w} with padding {padding}")));
        };
        let g = Geom { c, h, w, k: kh, stride, pad: padding, ho, wo };
        let mut y = conv_forward(self.data(), b, weight.data(), o, &g);
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(bias) = bias {
            add_bias(&mut y, bias.data(), ho * wo);
            parents.push(bias.clone());
        }
        Tensor::from_op(y, vec![b, o, ho, wo], parents, Conv2dOp { g, batch: b, out_channels: o })
    }

    /// 2-D transposed convolution. `weight` is `[C_out, C_in, k, k]`, the same
    /// layout as [`Tensor::conv2d`]; the output side is
    /// `(H - 1) * stride - 2 * padding + k`.
    pub fn conv_transpose2d(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>, stride: usize, padding: usize) -> Result<Tensor<T>> {
        const OP: &str = "conv_transpose2d";
        let [b, ci, h, w] = self.dims4(OP)?;
        let [co, wc, kh, kw] = weight.dims4(OP)?;
        if wc != ci {
            return Err(TensorError::ShapeMismatch { op: OP, lhs: self.shape().to_vec(), rhs: weight.shape().to_vec() });
        }
        if kh != kw || kh == 0 {
            return Err(invalid(OP, format!("kernel must be square and non-empty, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(invalid(OP, "stride must be at least 1"));
        }
        check_bias(OP, bias, co)?;
        let (Some(ho), Some(wo)) = (
            conv_transpose_output_len(h, kh, stride, padding),
            conv_transpose_output_len(w, kh, stride, padding),
        ) else {
            return Err(invalid(OP, format!("padding {padding} too large for input {h}x{w}")));
        };
        // forward conv from the [co, ho, wo] output back to the [ci, h, w] input
        let g = Geom { c: co, h: ho, w: wo, k: kh, stride, pad: padding, ho: h, wo: w };
        if conv_output_len(ho, kh, stride, padding) != Some(h) || conv_output_len(wo, kh, stride, padding) != Some(w) {
            return Err(invalid(OP, "geometry is not invertible for these stride/padding values"));
        }
        let k = swap_leading(weight.data(), co, ci, kh * kw);
        let mut y = conv_input_grad(self.data(), b, &k, ci, &g);
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(bias) = bias {
            add_bias(&mut y, bias.data(), ho * wo);
            parents.push(bias.clone());
        }
        Tensor::from_op(
            y,
            vec![b, co, ho, wo],
            parents,
            ConvTranspose2dOp { g, batch: b, in_channels: ci, out_channels: co, kernel: weight.shape().to_vec() },
        )
    }

    /// Average pooling with square window and stride `window`; trailing
    /// rows/columns that do not fill a window are dropped.
    pub fn avg_pool2d(&self, window: usize) -> Result<Tensor<T>> {
        const OP: &str = "avg_pool2d";
        let [b, c, h, w] = self.dims4(OP)?;
        if window == 0 || window > h || window > w {
            return Err(invalid(OP, format!("window {window} invalid for {h}x{w}")));
        }
        if window == 1 {
            return self.reshape(self.shape().to_vec());
        }
        let (ho, wo) = (h / window, w / window);
        let norm = T::one() / T::from_usize(window * window).unwrap();
        let x = self.data();
        let mut y = vec![T::zero(); b * c * ho * wo];
        for (plane, out) in x.chunks(h * w).zip(y.chunks_mut(ho * wo)) {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = T::zero();
                    for dy in 0..window {
                        let row = &plane[(oy * window + dy) * w + ox * window..][..window];
                        s += row.iter().copied().sum::<T>();
                    }
                    out[oy * wo + ox] = s * norm;
                }
            }
        }
        struct AvgPoolOp<T> {
            window: usize,
            h: usize,
            w: usize,
            norm: T,
        }
        impl<T: Scalar> BackwardOp<T> for AvgPoolOp<T> {
            fn name(&self) -> &'static str {
                "avg_pool2d"
            }
            fn backward(&self, p: &[Tensor<T>], _: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
                let (h, w, k) = (self.h, self.w, self.window);
                let (ho, wo) = (h / k, w / k);
                let mut dx = vec![T::zero(); p[0].numel()];
                for (plane, g) in dx.chunks_mut(h * w).zip(grad.chunks(ho * wo)) {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let v = g[oy * wo + ox] * self.norm;
                            for dy in 0..k {
                                plane[(oy * k + dy) * w + ox * k..][..k].iter_mut().for_each(|d| *d += v);
                            }
                        }
                    }
                }
                vec![Some(dx)]
            }
        }
        Tensor::from_op(y, vec![b, c, ho, wo], vec![self.clone()], AvgPoolOp { window, h, w, norm })
    }

    /// Max pooling with square window and stride `window`.
    pub fn max_pool2d(&self, window: usize) -> Result<Tensor<T>> {
        const OP: &str = "max_pool2d";
        let [b, c, h, w] = self.dims4(OP)?;
        if window == 0 || window > h || window > w {
            return Err(invalid(OP, format!("window {window} invalid for {h}x{w}")));
        }
        let (ho, wo) = (h / window, w / window);
        let x = self.data();
        let mut y = vec![T::zero(); b * c * ho * wo];
        let mut arg = vec![0usize; y.len()];
        for (pi, plane) in x.chunks(h * w).enumerate() {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = (T::neg_infinity(), 0);
                    for dy in 0..window {
                        for dx in 0..window {
                            let i = (oy * window + dy) * w + ox * window + dx;
                            if plane[i] > best.0 {
                                best = (plane[i], i);
                            }
                        }
                    }
                    let o = (pi * ho + oy) * wo + ox;
                    y[o] = best.0;
                    arg[o] = pi * h * w + best.1;
                }
            }
        }
        struct MaxPoolOp(Vec<usize>);
        impl<T: Scalar> BackwardOp<T> for MaxPoolOp {
            fn name(&self) -> &'static str {
                "max_pool2d"
            }
            fn backward(&self, p: &[Tensor<T>], _: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
                let mut dx = vec![T::zero(); p[0].numel()];
                for (g, &i) in grad.iter().zip(&self.0) {
                    dx[i] += *g;
                }
                vec![Some(dx)]
            }
        }
        Tensor::from_op(y, vec![b, c, ho, wo], vec![self.clone()], MaxPoolOp(arg))
    }
}
