use std::collections::{BTreeMap, HashMap, HashSet};

use crate::error::{Result, TensorError};
use crate::ops::vjp;
use crate::tensor::{Tensor, TensorId};

/// Gradient of a loss with respect to one leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafGrad {
    pub name: Option<String>,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Gradients keyed by the identity of the leaf tensors that required them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientMap {
    grads: BTreeMap<TensorId, LeafGrad>,
}

impl GradientMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, tensor: &Tensor) -> Option<&[f64]> {
        self.grads.get(&tensor.id()).map(|g| g.values.as_slice())
    }

    pub fn get_by_id(&self, id: TensorId) -> Option<&LeafGrad> {
        self.grads.get(&id)
    }

    pub fn contains(&self, tensor: &Tensor) -> bool {
        self.grads.contains_key(&tensor.id())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = TensorId> + '_ {
        self.grads.keys().copied()
    }

    /// Names of all named leaves with a gradient, sorted.
    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .grads
            .values()
            .filter_map(|g| g.name.clone())
            .collect();
        names.sort();
        names
    }

    pub fn iter(&self) -> impl Iterator<Item = (TensorId, &LeafGrad)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    /// Adds every gradient of `other` into this map.
    pub fn accumulate(&mut self, other: GradientMap) {
        for (id, g) in other.grads {
            match self.grads.get_mut(&id) {
                Some(existing) => existing
                    .values
                    .iter_mut()
                    .zip(&g.values)
                    .for_each(|(a, b)| *a += b),
                None => {
                    self.grads.insert(id, g);
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.values_mut() {
            g.values.iter_mut().for_each(|v| *v *= c);
        }
    }

    /// Inserts an all-zero gradient for `tensor` unless one is present.
    pub fn insert_zeros(&mut self, tensor: &Tensor) {
        self.grads.entry(tensor.id()).or_insert_with(|| LeafGrad {
            name: tensor.name().map(str::to_owned),
            shape: tensor.shape().to_vec(),
            values: vec![0.0; tensor.numel()],
        });
    }

    /// True when any gradient entry is NaN or infinite.
    pub fn has_non_finite(&self) -> bool {
        self.grads
            .values()
            .any(|g| g.values.iter().any(|v| !v.is_finite()))
    }
}

/// Topological order (inputs before outputs) over the graph nodes that
/// require gradients.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut visited: HashSet<TensorId> = HashSet::new();
    let mut order = Vec::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(node) = &t.0.node {
            for p in node.parents.iter().rev() {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}

impl Tensor {
    /// Reverse-mode gradients of a single-valued tensor with respect to every
    /// leaf that requires gradients. Intermediate gradients are dropped as
    /// soon as they have been propagated.
    pub fn backward(&self) -> Result<GradientMap> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape().to_vec(),
            });
        }
        if !self.requires_grad() {
            return Err(TensorError::Disconnected);
        }
        let order = topo_order(self);
        let mut pending: HashMap<TensorId, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        let mut out = GradientMap::new();

        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            match &t.0.node {
                None => {
                    let dtype = t.dtype();
                    out.grads.insert(
                        t.id(),
                        LeafGrad {
                            name: t.name().map(str::to_owned),
                            shape: t.shape().to_vec(),
                            values: g.into_iter().map(|v| dtype.round(v)).collect(),
                        },
                    );
                }
                Some(node) => {
                    let parent_grads = vjp(&node.op, t, &node.parents, &g);
                    for (p, pg) in node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        match pending.get_mut(&p.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                pending.insert(p.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::DType;

    fn var(v: f64) -> Tensor {
        Tensor::variable(&[1], vec![v], DType::F64).unwrap()
    }

    #[test]
    fn relu_gradient_on_each_side() {
        let x = var(2.0);
        let g = x.relu().sum().backward().unwrap();
        assert_eq!(g.get(&x).unwrap(), &[1.0]);
        let x = var(-1.0);
        let g = x.relu().sum().backward().unwrap();
        assert_eq!(g.get(&x).unwrap(), &[0.0]);
        let x = var(0.0);
        let g = x.relu().sum().backward().unwrap();
        assert_eq!(g.get(&x).unwrap(), &[0.0]);
    }

    #[test]
    fn reused_leaf_accumulates() {
        // d/dx (x*x + 3x) = 2x + 3
        let x = var(1.5);
        let loss = x.mul(&x).unwrap().add(&x.scale(3.0)).unwrap().sum();
        let g = loss.backward().unwrap();
        assert_eq!(g.get(&x).unwrap(), &[6.0]);
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = Tensor::variable(&[2], vec![1.0, 2.0], DType::F64).unwrap();
        assert!(matches!(
            x.relu().backward().unwrap_err(),
            TensorError::NonScalarLoss { .. }
        ));
    }

    #[test]
    fn constant_loss_is_disconnected() {
        let c = Tensor::scalar(1.0, DType::F64);
        assert_eq!(c.exp().backward().unwrap_err(), TensorError::Disconnected);
    }

    #[test]
    fn constants_get_no_entry() {
        let w = Tensor::new_in(&[2, 2], vec![1.0, 2.0, 3.0, 4.0], DType::F64).unwrap();
        let x = Tensor::parameter("x", &[1, 2], vec![0.5, -0.5], DType::F64).unwrap();
        let g = x.matmul(&w).unwrap().sum().backward().unwrap();
        assert!(g.contains(&x));
        assert!(!g.contains(&w));
        assert_eq!(g.names(), vec!["x".to_string()]);
        // d/dx sum(x W) = row sums of W
        assert_eq!(g.get(&x).unwrap(), &[3.0, 7.0]);
    }

    #[test]
    fn max_gradient_routes_to_first_argmax() {
        let x = Tensor::variable(&[3, 1], vec![2.0, 2.0, 1.0], DType::F64).unwrap();
        let g = x.max_axis(0).unwrap().sum().backward().unwrap();
        assert_eq!(g.get(&x).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn accumulate_and_scale() {
        let x = var(1.0);
        let mut a = x.scale(2.0).sum().backward().unwrap();
        let b = x.scale(3.0).sum().backward().unwrap();
        a.accumulate(b);
        a.scale(0.5);
        assert_eq!(a.get(&x).unwrap(), &[2.5]);
        let y = var(4.0);
        a.insert_zeros(&y);
        a.insert_zeros(&x);
        assert_eq!(a.get(&y).unwrap(), &[0.0]);
        assert_eq!(a.get(&x).unwrap(), &[2.5]);
    }
}
