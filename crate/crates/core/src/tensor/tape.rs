use std::collections::HashMap;

use super::ops::{self, Op};
use super::{Precision, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

/// Linear record of executed ops. Records are appended in execution order, so
/// every record's operands precede it and a reverse sweep is a valid
/// topological order.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every record, ready for a new forward pass.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Records a leaf. Gradients are reported for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn precision(&self, v: Var) -> Precision {
        self.nodes[v.0].value.precision()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn ensure_recording(&self) -> Result<()> {
        if self.consumed {
            Err(Error::TapeConsumed)
        } else {
            Ok(())
        }
    }

    pub(crate) fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        self.ensure_recording()?;
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: if requires_grad { op } else { Op::Detached },
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a one-element `loss`. Afterwards the op records are
    /// released; values stay readable but the tape accepts no further ops or
    /// backward calls until [`Tape::clear`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.ensure_recording()?;
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            ops::backward(&self.nodes, i, &g, &mut grads)?;
        }
        let mut out = Gradients::default();
        for (i, g) in grads.into_iter().enumerate() {
            if let (Some(g), Op::Leaf) = (g, &self.nodes[i].op) {
                let value = &self.nodes[i].value;
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite { op: "backward" });
                }
                out.grads
                    .insert(Var(i), Tensor::from_raw(value.shape().to_vec(), g, value.precision()));
            }
        }
        for node in self.nodes.iter_mut() {
            if !matches!(node.op, Op::Leaf) {
                node.op = Op::Detached;
            }
        }
        self.consumed = true;
        Ok(out)
    }
}

/// Adds `delta` into the gradient slot of `v`, rounding to the node precision.
pub(crate) fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return;
    }
    let p = node.value.precision();
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(delta) {
                *a = p.round(*a + b);
            }
        }
        slot @ None => {
            let mut d = delta;
            p.round_all(&mut d);
            *slot = Some(d);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, v: Vec<f64>) -> Tensor {
        Tensor::new(shape, v, Precision::F64).unwrap()
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.param(t(vec![3], vec![1.0, -2.0, 5.0]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_square_gives_identity_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(vec![2, 2], vec![0.5, -1.5, 2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let l = tape.scale(s, 0.5).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.5, -1.5, 2.0, 3.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(t(vec![2], vec![1.0, 2.0]));
        let a = tape.scale(x, 2.0).unwrap();
        let b = tape.scale(x, 3.0).unwrap();
        let c = tape.add(a, b).unwrap();
        let s = tape.sum(c).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[5.0, 5.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_second_call() {
        let mut tape = Tape::new();
        let x = tape.param(t(vec![2], vec![1.0, 2.0]));
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Backward(_))));
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::TapeConsumed)));
        assert!(matches!(tape.sum(x), Err(Error::TapeConsumed)));
        tape.clear();
        assert!(tape.is_empty());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(vec![2], vec![1.0, 2.0]));
        let c = tape.constant(t(vec![2], vec![3.0, 4.0]));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }
}
