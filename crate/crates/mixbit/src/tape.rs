//! Reverse-mode differentiation over an operation tape.
//!
//! A forward pass records one node per executed op; `backward` replays the
//! tape in reverse execution order exactly once per node and accumulates
//! gradients into a side table, so leaf tensors stay immutable.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

pub struct Node {
    pub value: Tensor,
    pub requires_grad: bool,
    op: Option<Box<dyn TapeOp>>,
}

/// A recorded differentiable operation. `backward` reads input values from
/// `nodes` and adds each input's gradient contribution through the sink.
pub trait TapeOp {
    fn backward(&self, grad_out: &Tensor, nodes: &[Node], sink: &mut GradSink);
}

pub struct GradSink {
    grads: Vec<Option<Tensor>>,
}

impl GradSink {
    pub fn add(&mut self, var: VarId, grad: Tensor) {
        match &mut self.grads[var.0] {
            Some(existing) => existing
                .add_assign(&grad)
                .expect("gradient shape mismatch during accumulation"),
            slot => *slot = Some(grad),
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: VarId) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: VarId) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> VarId {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: None,
        });
        VarId(self.nodes.len() - 1)
    }

    /// Records an op result. The output is checked finite here, which is the
    /// single enforcement point for the "no NaN/Inf after any op" invariant.
    pub fn push(
        &mut self,
        value: Tensor,
        requires_grad: bool,
        op: Box<dyn TapeOp>,
        context: &str,
    ) -> Result<VarId> {
        value.check_finite(context)?;
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Some(op),
        });
        Ok(VarId(self.nodes.len() - 1))
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: VarId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Reverse sweep from a scalar root. Each recorded op is visited exactly
    /// once, in reverse execution order.
    pub fn backward(&self, root: VarId) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(Error::InvalidArg(
                "backward root must be a scalar".to_string(),
            ));
        }
        let mut sink = GradSink {
            grads: vec![None; self.nodes.len()],
        };
        sink.grads[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(grad_out) = sink.grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Some(op) => op.backward(&grad_out, &self.nodes, &mut sink),
                // Leaf: keep the accumulated gradient.
                None => sink.grads[idx] = Some(grad_out),
            }
        }
        Ok(Gradients { grads: sink.grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct SquareSum {
        input: VarId,
    }

    impl TapeOp for SquareSum {
        fn backward(&self, grad_out: &Tensor, nodes: &[Node], sink: &mut GradSink) {
            let g = grad_out.item();
            let x = &nodes[self.input.0].value;
            sink.add(self.input, x.scale(2.0 * g));
        }
    }

    #[test]
    fn backward_through_custom_op() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let y = tape
            .push(
                Tensor::scalar(5.0),
                true,
                Box::new(SquareSum { input: x }),
                "square_sum",
            )
            .unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn non_finite_op_output_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1]), true);
        let bad = Tensor::from_raw(vec![1], vec![f64::NAN]);
        assert!(tape
            .push(bad, true, Box::new(SquareSum { input: x }), "bad_op")
            .is_err());
    }
}
