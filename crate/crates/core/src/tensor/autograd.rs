use std::collections::{HashMap, HashSet};

use super::{Result, Scalar, Tensor, TensorError};

impl<F: Scalar> Tensor<F> {
    /// Back-propagates from this one-element tensor into every leaf that
    /// requires a gradient. Gradients accumulate across calls.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward() needs a scalar output, got shape {:?}",
                self.shape()
            )));
        }
        self.backward_with(vec![F::one()])
    }

    /// Back-propagates an explicit upstream gradient of the same shape as `self`.
    pub fn backward_with(&self, seed: Vec<F>) -> Result<()> {
        if seed.len() != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "backward",
                lhs: self.shape().to_vec(),
                rhs: vec![seed.len()],
            });
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let order = topo_order(self);
        let mut pending: HashMap<u64, Vec<F>> = HashMap::new();
        pending.insert(self.node.id, seed);

        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.node.id) else {
                continue;
            };
            match &t.node.grad_fn {
                None => accumulate_leaf(t, g),
                Some(gf) => {
                    let needs: Vec<bool> = gf.parents.iter().map(|p| p.requires_grad()).collect();
                    let grads = (gf.backward)(&g, &needs);
                    debug_assert_eq!(grads.len(), gf.parents.len(), "{}: backward arity", gf.op);
                    for ((parent, pg), need) in gf.parents.iter().zip(grads).zip(needs) {
                        let Some(pg) = pg else { continue };
                        if !need {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), parent.numel(), "{}: gradient size", gf.op);
                        match pending.get_mut(&parent.node.id) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a = *a + *b),
                            None => {
                                pending.insert(parent.node.id, pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate_leaf<F: Scalar>(t: &Tensor<F>, g: Vec<F>) {
    let mut slot = t.node.grad.lock().expect("grad lock poisoned");
    match slot.as_mut() {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
        None => *slot = Some(g),
    }
}

/// Post-order over the differentiable part of the graph rooted at `root`.
fn topo_order<F: Scalar>(root: &Tensor<F>) -> Vec<Tensor<F>> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack: Vec<(Tensor<F>, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.node.id) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(gf) = &t.node.grad_fn {
            for p in &gf.parents {
                if p.requires_grad() && !visited.contains(&p.node.id) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}
