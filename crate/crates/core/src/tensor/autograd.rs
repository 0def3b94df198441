use std::collections::HashMap;

use super::{Result, Tensor, TensorError};
use crate::scalar::Scalar;

/// Gradients of one backward pass, keyed by tensor identity.
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar> {
    grads: HashMap<usize, Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, t: &Tensor<T>) -> Option<&[T]> {
        self.grads.get(&t.id()).map(Vec::as_slice)
    }

    /// Gradient of `t`, or zeros when the root does not depend on it.
    pub fn get_or_zeros(&self, t: &Tensor<T>) -> Vec<T> {
        self.get(t)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); t.numel()])
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Post-order of all nodes reachable from `root` through gradient-carrying edges.
fn topo_order<T: Scalar>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order = Vec::new();
    let mut visited = std::collections::HashSet::new();
    let mut stack: Vec<(Tensor<T>, usize)> = vec![(root.clone(), 0)];
    visited.insert(root.id());
    while let Some((node, next)) = stack.pop() {
        let parents = node.parents();
        if next < parents.len() {
            let p = parents[next].clone();
            stack.push((node, next + 1));
            if p.requires_grad() && visited.insert(p.id()) {
                stack.push((p, 0));
            }
        } else {
            order.push(node);
        }
    }
    order
}

/// Reverse-mode differentiation from a scalar `root`.
///
/// Returns gradients for every leaf that requires them and is reachable
/// from `root`. Each call starts from zero; nothing accumulates across calls.
pub fn backward<T: Scalar>(root: &Tensor<T>) -> Result<Gradients<T>> {
    if root.numel() != 1 {
        return Err(TensorError::NonScalarRoot(root.shape().to_vec()));
    }
    let mut out = HashMap::new();
    if !root.requires_grad() {
        return Ok(Gradients { grads: out });
    }
    let order = topo_order(root);
    let mut pending: HashMap<usize, Vec<T>> = HashMap::new();
    pending.insert(root.id(), vec![T::one()]);
    for node in order.iter().rev() {
        let Some(grad) = pending.remove(&node.id()) else {
            continue;
        };
        match node.op() {
            None => {
                out.insert(node.id(), grad);
            }
            Some(op) => {
                let contributions = op.backward(node.parents(), node.data(), &grad);
                debug_assert_eq!(contributions.len(), node.parents().len(), "{}", op.name());
                for (parent, contrib) in node.parents().iter().zip(contributions) {
                    let Some(contrib) = contrib else { continue };
                    if !parent.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(contrib.len(), parent.numel(), "{}", op.name());
                    match pending.get_mut(&parent.id()) {
                        Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += *c),
                        None => {
                            pending.insert(parent.id(), contrib);
                        }
                    }
                }
            }
        }
    }
    Ok(Gradients { grads: out })
}
