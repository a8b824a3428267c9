use std::collections::{HashMap, HashSet};

use super::Tensor;
use crate::error::{Error, Result};

/// Gradients of a scalar loss with respect to every tracked tensor it reaches.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    grads: HashMap<u64, Vec<f64>>,
}

impl Gradients {
    /// Gradient for `t`, or `None` if `t` was not reached by the backward pass.
    pub fn get(&self, t: &Tensor) -> Option<Tensor> {
        self.grads
            .get(&t.id())
            .map(|g| Tensor::leaf(t.shape().to_vec(), g.clone(), false))
    }

    /// Gradient for `t`; tensors off the loss path get zeros.
    pub fn wrt(&self, t: &Tensor) -> Tensor {
        self.get(t).unwrap_or_else(|| Tensor::zeros(t.shape()))
    }

    pub fn raw(&self, t: &Tensor) -> Option<&[f64]> {
        self.grads.get(&t.id()).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Reverse-mode sweep from a one-element `loss`.
pub fn backward(loss: &Tensor) -> Result<Gradients> {
    if loss.numel() != 1 {
        return Err(Error::Contract(format!(
            "backward needs a one-element loss, got shape {:?}",
            loss.shape()
        )));
    }
    let mut out = Gradients::default();
    if !loss.is_tracked() {
        return Ok(out);
    }

    let order = topo_order(loss);
    out.grads.insert(loss.id(), vec![1.0]);

    for node in order.iter().rev() {
        let Some(grad_fn) = &node.0.grad_fn else { continue };
        // Interior node gradients are only needed until consumed.
        let Some(g) = out.grads.remove(&node.id()) else {
            continue;
        };
        let parent_grads = grad_fn.rule.backward(&g, node, &grad_fn.parents);
        debug_assert_eq!(parent_grads.len(), grad_fn.parents.len(), "{}", grad_fn.rule.name());
        for (parent, pg) in grad_fn.parents.iter().zip(parent_grads) {
            let Some(pg) = pg else { continue };
            if !parent.is_tracked() {
                continue;
            }
            debug_assert_eq!(pg.len(), parent.numel(), "{}", grad_fn.rule.name());
            match out.grads.get_mut(&parent.id()) {
                Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                None => {
                    out.grads.insert(parent.id(), pg);
                }
            }
        }
    }
    Ok(out)
}

/// Tracked nodes reachable from `root`, parents before children.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    // (node, children already pushed)
    let mut stack = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !seen.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        if let Some(g) = &node.0.grad_fn {
            for p in &g.parents {
                if p.is_tracked() && !seen.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}
