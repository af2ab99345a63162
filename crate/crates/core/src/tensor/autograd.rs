use std::collections::{HashMap, HashSet};

use super::{Float, Tensor};
use crate::error::{bail, Result};

/// Recorded operations reachable from a root, in topological order: every
/// tensor appears after all of its inputs.
pub struct Graph<T: Float> {
    nodes: Vec<Tensor<T>>,
}

impl<T: Float> Graph<T> {
    pub fn from_root(root: &Tensor<T>) -> Self {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        // Iterative post-order DFS; graphs from deep models overflow recursion.
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(root.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = t.node() {
                for inp in node.inputs.iter().rev() {
                    if inp.requires_grad() && !visited.contains(&inp.id()) {
                        stack.push((inp.clone(), false));
                    }
                }
            }
        }
        Graph { nodes: order }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes
            .iter()
            .map(|t| t.node().map_or("leaf", |n| n.op))
            .collect()
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.nodes
    }
}

impl<T: Float> Tensor<T> {
    /// Accumulates ∂self/∂leaf into every reachable leaf that requires grad.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            bail!(
                Contract,
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            );
        }
        if !self.requires_grad() {
            bail!(Contract, "backward on a tensor with no recorded graph");
        }
        let graph = Graph::from_root(self);
        let mut grads: HashMap<usize, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);
        for t in graph.nodes.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            match t.node() {
                None => t.accumulate_grad(&g),
                Some(node) => {
                    let input_grads = (node.backward)(&g);
                    debug_assert_eq!(input_grads.len(), node.inputs.len(), "op {}", node.op);
                    for (inp, ig) in node.inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        if !inp.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(ig.len(), inp.numel(), "op {}", node.op);
                        match grads.get_mut(&inp.id()) {
                            Some(acc) => {
                                for (a, b) in acc.iter_mut().zip(ig) {
                                    *a += b;
                                }
                            }
                            None => {
                                grads.insert(inp.id(), ig);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topological_order() {
        let a = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let b = a.square();
        let c = b.add(&a).unwrap().sum();
        let g = Graph::from_root(&c);
        let ids: Vec<usize> = g.tensors().iter().map(|t| t.id()).collect();
        let pos = |t: &Tensor<f64>| ids.iter().position(|&i| i == t.id()).unwrap();
        assert!(pos(&a) < pos(&b));
        assert!(pos(&b) < pos(&c));
        assert_eq!(g.len(), 4);
    }

    #[test]
    fn sum_grad_is_ones() {
        let x = Tensor::<f32>::param(vec![0.5; 6], &[2, 3]).unwrap();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn sum_of_squares_grad() {
        let x = Tensor::<f32>::param(vec![1.0, 2.0], &[2]).unwrap();
        x.square().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::<f32>::param(vec![1.0, 2.0], &[2]).unwrap();
        x.sum().backward().unwrap();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = Tensor::<f32>::param(vec![1.0, 2.0], &[2]).unwrap();
        assert!(x.square().backward().is_err());
    }

    #[test]
    fn shared_input_accumulates_both_paths() {
        // d/dx (x*x) through mul with the same tensor twice.
        let x = Tensor::<f64>::param(vec![3.0], &[1]).unwrap();
        x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }
}
