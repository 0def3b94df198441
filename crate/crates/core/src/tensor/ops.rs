//! Elementwise, reduction and layout operations.

use super::{invalid, numel, BackwardOp, Result, Tensor, TensorError};
use crate::scalar::Scalar;

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

struct AddOp;
impl<T: Scalar> BackwardOp<T> for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, _: &[Tensor<T>], _: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(grad.to_vec()), Some(grad.to_vec())]
    }
}

struct SubOp;
impl<T: Scalar> BackwardOp<T> for SubOp {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, _: &[Tensor<T>], _: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(grad.to_vec()), Some(grad.iter().map(|g| -*g).collect())]
    }
}

struct MulOp;
impl<T: Scalar> BackwardOp<T> for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, p: &[Tensor<T>], _: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let ga = grad.iter().zip(p[1].data()).map(|(g, b)| *g * *b).collect();
        let gb = grad.iter().zip(p[0].data()).map(|(g, a)| *g * *a).collect();
        vec![Some(ga), Some(gb)]
    }
}

struct MaximumOp;
impl<T: Scalar> BackwardOp<T> for MaximumOp {
    fn name(&self) -> &'static str {
        "maximum"
    }
    fn backward(&self, p: &[Tensor<T>], _: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (a, b) = (p[0].data(), p[1].data());
        // ties send the gradient to the left operand
        let ga = grad.iter().zip(a.iter().zip(b)).map(|(g, (x, y))| if x >= y { *g } else { T::zero() });
        let gb = grad.iter().zip(a.iter().zip(b)).map(|(g, (x, y))| if x >= y { T::zero() } else { *g });
        vec![Some(ga.collect()), Some(gb.collect())]
    }
}

struct ScaleOp<T>(T);
impl<T: Scalar> BackwardOp<T> for ScaleOp<T> {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _: &[Tensor<T>], _: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(grad.iter().map(|g| *g * self.0).collect())]
    }
}

struct SumOp;
impl<T: Scalar> BackwardOp<T> for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, p: &[Tensor<T>], _: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![grad[0]; p[0].numel()])]
    }
}

struct LeakyReluOp<T>(T);
impl<T: Scalar> BackwardOp<T> for LeakyReluOp<T> {
    fn name(&self) -> &'static str {
        "leaky_relu"
    }
    fn backward(&self, p: &[Tensor<T>], _: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let g = grad
            .iter()
            .zip(p[0].data())
            .map(|(g, x)| if *x > T::zero() { *g } else { *g * self.0 })
            .collect();
        vec![Some(g)]
    }
}

struct ConcatOp {
    channels: Vec<usize>,
    batch: usize,
    plane: usize,
}
impl<T: Scalar> BackwardOp<T> for ConcatOp {
    fn name(&self) -> &'static str {
        "concat_channels"
    }
    fn backward(&self, _: &[Tensor<T>], _: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let total: usize = self.channels.iter().sum();
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.channels.len());
        for &c in &self.channels {
            let mut g = Vec::with_capacity(self.batch * c * self.plane);
            for b in 0..self.batch {
                let start = (b * total + offset) * self.plane;
                g.extend_from_slice(&grad[start..start + c * self.plane]);
            }
            out.push(Some(g));
            offset += c;
        }
        out
    }
}

struct SoftmaxOp {
    channels: usize,
    plane: usize,
}
impl<T: Scalar> BackwardOp<T> for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax_channels"
    }
    fn backward(&self, _: &[Tensor<T>], probs: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (c, plane) = (self.channels, self.plane);
        let mut dx = vec![T::zero(); probs.len()];
        for (b, chunk) in dx.chunks_mut(c * plane).enumerate() {
            let base = b * c * plane;
            for px in 0..plane {
                let mut dot = T::zero();
                for ch in 0..c {
                    let i = base + ch * plane + px;
                    dot += grad[i] * probs[i];
                }
                for ch in 0..c {
                    let i = base + ch * plane + px;
                    chunk[ch * plane + px] = probs[i] * (grad[i] - dot);
                }
            }
        }
        vec![Some(dx)]
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("add", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| *a + *b).collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone(), other.clone()], AddOp)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("sub", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| *a - *b).collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone(), other.clone()], SubOp)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("mul", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| *a * *b).collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone(), other.clone()], MulOp)
    }

    /// Elementwise maximum of two same-shape tensors.
    pub fn maximum(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("maximum", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a.max(*b)).collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone(), other.clone()], MaximumOp)
    }

    pub fn scale(&self, factor: T) -> Result<Tensor<T>> {
        let data = self.data().iter().map(|a| *a * factor).collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], ScaleOp(factor))
    }

    /// Sum of all elements as a scalar tensor.
    pub fn sum(&self) -> Result<Tensor<T>> {
        let s = self.data().iter().copied().sum();
        Tensor::from_op(vec![s], Vec::new(), vec![self.clone()], SumOp)
    }

    pub fn mean(&self) -> Result<Tensor<T>> {
        if self.numel() == 0 {
            return Err(invalid("mean", "empty tensor"));
        }
        self.sum()?.scale(T::one() / T::from_usize(self.numel()).unwrap())
    }

    pub fn leaky_relu(&self, slope: T) -> Result<Tensor<T>> {
        let data = self
            .data()
            .iter()
            .map(|x| if *x > T::zero() { *x } else { *x * slope })
            .collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], LeakyReluOp(slope))
    }

    pub fn relu(&self) -> Result<Tensor<T>> {
        self.leaky_relu(T::zero())
    }

    /// Concatenates `[B, C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| invalid("concat_channels", "no inputs"))?;
        let [b, _, h, w] = first.dims4("concat_channels")?;
        let mut channels = Vec::with_capacity(parts.len());
        for p in parts {
            let [pb, pc, ph, pw] = p.dims4("concat_channels")?;
            if (pb, ph, pw) != (b, h, w) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            channels.push(pc);
        }
        let plane = h * w;
        let total: usize = channels.iter().sum();
        let mut data = Vec::with_capacity(b * total * plane);
        for bi in 0..b {
            for (p, &c) in parts.iter().zip(&channels) {
                let start = bi * c * plane;
                data.extend_from_slice(&p.data()[start..start + c * plane]);
            }
        }
        Tensor::from_op(
            data,
            vec![b, total, h, w],
            parts.to_vec(),
            ConcatOp { channels, batch: b, plane },
        )
    }

    /// Softmax across the channel axis of a `[B, C, H, W]` tensor.
    pub fn softmax_channels(&self) -> Result<Tensor<T>> {
        let [_, c, h, w] = self.dims4("softmax_channels")?;
        let plane = h * w;
        let x = self.data();
        let mut out = vec![T::zero(); x.len()];
        for (src, dst) in x.chunks(c * plane).zip(out.chunks_mut(c * plane)) {
            for px in 0..plane {
                let m = (0..c).map(|ch| src[ch * plane + px]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for ch in 0..c {
                    let e = (src[ch * plane + px] - m).exp();
                    dst[ch * plane + px] = e;
                    z += e;
                }
                for ch in 0..c {
                    dst[ch * plane + px] /= z;
                }
            }
        }
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], SoftmaxOp { channels: c, plane })
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor<T>> {
        let shape = shape.into();
        if numel(&shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape,
            });
        }
        struct ReshapeOp;
        impl<T: Scalar> BackwardOp<T> for ReshapeOp {
            fn name(&self) -> &'static str {
                "reshape"
            }
            fn backward(&self, _: &[Tensor<T>], _: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
                vec![Some(grad.to_vec())]
            }
        }
        Tensor::from_op(self.data().to_vec(), shape, vec![self.clone()], ReshapeOp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;

    #[test]
    fn shape_mismatch_names_both_operands() {
        let a = Tensor::<f64>::zeros([2, 3]);
        let b = Tensor::<f64>::zeros([3, 2]);
        let err = a.add(&b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch { op: "add", lhs: vec![2, 3], rhs: vec![3, 2] }
        );
    }

    #[test]
    fn concat_then_backward_splits_gradient() {
        let a = Tensor::<f64>::param(vec![1.0, 2.0, 3.0, 4.0], [1, 1, 2, 2]).unwrap();
        let b = Tensor::<f64>::param(vec![5.0; 8], [1, 2, 2, 2]).unwrap();
        let c = Tensor::concat_channels(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(c.shape(), &[1, 3, 2, 2]);
        assert_eq!(&c.data()[..4], a.data());
        let w = Tensor::<f64>::new((0..12).map(f64::from).collect(), [1, 3, 2, 2]).unwrap();
        let g = backward(&c.mul(&w).unwrap().sum().unwrap()).unwrap();
        assert_eq!(g.get(&a).unwrap(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(g.get(&b).unwrap(), &[4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0]);
    }

    #[test]
    fn softmax_sums_to_one_per_pixel() {
        let x = Tensor::<f64>::from_f64(&[1.0, -2.0, 0.5, 3.0, 0.0, 0.0], [1, 3, 1, 2]).unwrap();
        let p = x.softmax_channels().unwrap();
        for px in 0..2 {
            let s: f64 = (0..3).map(|c| p.data()[c * 2 + px]).sum();
            assert!((s - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        assert!(matches!(
            Tensor::<f64>::new(vec![f64::NAN], [1]),
            Err(TensorError::NonFinite { .. })
        ));
        let big = Tensor::<f64>::new(vec![f64::MAX], [1]).unwrap();
        assert!(matches!(big.scale(10.0), Err(TensorError::NonFinite { op: "scale" })));
    }
}
