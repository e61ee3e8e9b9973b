//! Reverse-mode differentiation over a dynamically recorded graph.
//!
//! Every differentiable op returns a [`Var`] that holds its value, the
//! operands it was computed from, and a backward rule. Node ids grow
//! monotonically, so creation order is a topological order of the graph and
//! [`backward`] simply visits reachable nodes by descending id.
//!
//! Ops whose operands carry no gradient record nothing: their result is a
//! plain constant and intermediate values are released as soon as the
//! caller drops them. Inference and the memory benchmark rely on this.

use std::cell::Cell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Computes operand gradients from the output gradient, the operand values
/// and the op's own output value.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    id: u64,
    op: &'static str,
    value: Tensor,
    requires_grad: bool,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
}

impl Drop for Node {
    // Unlinks long parent chains iteratively so deep graphs cannot overflow the stack.
    fn drop(&mut self) {
        let mut stack: Vec<Var> = std::mem::take(&mut self.parents);
        while let Some(v) = stack.pop() {
            if let Ok(mut node) = Rc::try_unwrap(v.0) {
                stack.append(&mut node.parents);
            }
        }
    }
}

/// Handle to a value in the differentiation graph. Cloning is cheap.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl Var {
    /// Leaf that receives a gradient.
    pub fn param(value: Tensor) -> Var {
        Self::leaf(value, true)
    }

    /// Leaf without gradient.
    pub fn constant(value: Tensor) -> Var {
        Self::leaf(value, false)
    }

    pub fn leaf(value: Tensor, requires_grad: bool) -> Var {
        Var(Rc::new(Node {
            id: next_id(),
            op: "leaf",
            value,
            requires_grad,
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// Records an op result. When no operand requires a gradient the result
    /// is a detached constant.
    pub fn record(
        op: &'static str,
        value: Tensor,
        parents: &[&Var],
        backward: impl Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>> + 'static,
    ) -> Var {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let (parents, backward): (Vec<Var>, Option<BackwardFn>) = if requires_grad {
            (
                parents.iter().map(|&p| p.clone()).collect(),
                Some(Box::new(backward)),
            )
        } else {
            (Vec::new(), None)
        };
        Var(Rc::new(Node {
            id: next_id(),
            op,
            value,
            requires_grad,
            parents,
            backward,
        }))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn data(&self) -> &[f32] {
        self.0.value.data()
    }

    pub fn numel(&self) -> usize {
        self.0.value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn op_name(&self) -> &'static str {
        self.0.op
    }

    pub fn is_leaf(&self) -> bool {
        self.0.backward.is_none()
    }

    /// Copy of the value with no graph attached.
    pub fn detach(&self) -> Var {
        Var::constant(self.value().clone())
    }
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}<{}>({:?})", self.id(), self.op_name(), self.value())
    }
}

/// Gradients of every gradient-carrying leaf reached by [`backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    by_id: HashMap<u64, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: &Var) -> Option<&Tensor> {
        self.by_id.get(&v.id())
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

fn accumulate(slot: &mut HashMap<u64, Tensor>, id: u64, g: Tensor) {
    match slot.get_mut(&id) {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => {
            slot.insert(id, g);
        }
    }
}

/// Back-propagates from a scalar `loss`, consuming the handle.
///
/// Each reachable node is visited once, in reverse creation order.
pub fn backward(loss: Var) -> Result<Gradients> {
    if loss.numel() != 1 {
        return Err(Error::Contract(format!(
            "backward needs a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    if !loss.requires_grad() {
        return Err(Error::Contract(
            "backward on a value that does not depend on any parameter".into(),
        ));
    }

    let mut order: Vec<Var> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut stack = vec![loss.clone()];
    while let Some(v) = stack.pop() {
        if !v.requires_grad() || !seen.insert(v.id()) {
            continue;
        }
        for p in &v.0.parents {
            stack.push(p.clone());
        }
        order.push(v);
    }
    order.sort_unstable_by_key(|v| std::cmp::Reverse(v.id()));

    let mut pending: HashMap<u64, Tensor> = HashMap::new();
    pending.insert(loss.id(), Tensor::full(loss.shape(), 1.0));
    let mut leaves = Gradients::default();

    for v in order {
        let Some(grad) = pending.remove(&v.id()) else {
            continue;
        };
        let node = &v.0;
        match &node.backward {
            None => {
                leaves.by_id.insert(node.id, grad);
            }
            Some(rule) => {
                let operands: Vec<&Tensor> = node.parents.iter().map(|p| &p.0.value).collect();
                let grads = rule(&grad, &operands, &node.value);
                debug_assert_eq!(grads.len(), node.parents.len(), "op {}", node.op);
                for (p, g) in node.parents.iter().zip(grads) {
                    if let Some(g) = g {
                        if p.requires_grad() {
                            debug_assert_eq!(g.shape(), p.shape(), "grad shape for {}", node.op);
                            accumulate(&mut pending, p.id(), g);
                        }
                    }
                }
            }
        }
    }
    Ok(leaves)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_scalar_loss_is_rejected() {
        let x = Var::param(Tensor::zeros(&[2]));
        assert!(matches!(backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constant_ops_record_nothing() {
        let a = Var::constant(Tensor::zeros(&[3]));
        let b = a.add(&a).unwrap();
        assert!(b.is_leaf());
        assert!(!b.requires_grad());
    }

    #[test]
    fn shared_operand_accumulates() {
        // loss = sum(x*x + x) -> 2x + 1
        let x = Var::param(Tensor::new(&[2], vec![1.0, -3.0]).unwrap());
        let loss = x.mul(&x).unwrap().add(&x).unwrap().sum();
        let g = backward(loss).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[3.0, -5.0]);
    }

    #[test]
    fn deep_chain_drops_without_overflow() {
        let x = Var::param(Tensor::zeros(&[1]));
        let mut y = x.clone();
        for _ in 0..200_000 {
            y = y.add_scalar(1.0);
        }
        assert_eq!(y.data()[0], 200_000.0);
        drop(y);
    }
}
