//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every forward op appends one node holding its output value, its input
//! handles and a [`Backward`] rule. [`Tape::backward`] walks the nodes in
//! exact reverse recording order and sums gradient contributions from all
//! paths into each reachable node that requires a gradient.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded primitive.
pub trait Backward<T: Element>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input given the output gradient.
    ///
    /// `needs[i]` is false when input `i` does not require a gradient; the
    /// rule may return `None` for such inputs and skip the work.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

struct Node<T: Element> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    rule: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Recording of one forward computation.
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            rule: None,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient; `None` until a backward pass reached `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of `v`, or zeros if no path reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<T> {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Appends the result of a primitive. Rejects non-finite outputs.
    pub fn record(
        &mut self,
        op: &'static str,
        inputs: &[Var],
        output: Tensor<T>,
        rule: Box<dyn Backward<T>>,
    ) -> Result<Var> {
        if let Some(index) = output.first_non_finite() {
            return Err(Error::NonFinite { op, index });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: output,
            inputs: inputs.to_vec(),
            rule: if requires_grad { Some(rule) } else { None },
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Fills gradients of every `requires_grad` node reachable from `loss`.
    ///
    /// Repeated calls accumulate into existing gradients; use
    /// [`Tape::zero_grad`] to reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::arg("backward on an empty tape"));
        }
        let seed_shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::arg(format!(
                "backward needs a scalar loss, got shape {seed_shape:?}"
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut pending: Vec<Option<Tensor<T>>> = Vec::new();
        pending.resize_with(loss.0 + 1, || None);
        pending[loss.0] = Some(Tensor::ones(&seed_shape));

        for id in (0..=loss.0).rev() {
            let Some(g) = pending[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if let Some(rule) = &node.rule {
                let inputs: Vec<&Tensor<T>> =
                    node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let needs: Vec<bool> = node
                    .inputs
                    .iter()
                    .map(|v| self.nodes[v.0].requires_grad)
                    .collect();
                let grads = rule.backward(&inputs, &node.value, &g, &needs)?;
                if grads.len() != node.inputs.len() {
                    return Err(Error::arg(format!(
                        "backward rule `{}` returned {} gradients for {} inputs",
                        rule.name(),
                        grads.len(),
                        node.inputs.len()
                    )));
                }
                for ((input, gi), need) in node.inputs.iter().zip(grads).zip(needs) {
                    let Some(gi) = gi else { continue };
                    if !need {
                        continue;
                    }
                    if gi.shape() != self.nodes[input.0].value.shape() {
                        return Err(Error::dim(format!(
                            "backward rule `{}` produced gradient {:?} for input {:?}",
                            rule.name(),
                            gi.shape(),
                            self.nodes[input.0].value.shape()
                        )));
                    }
                    match &mut pending[input.0] {
                        Some(acc) => acc.add_assign(&gi)?,
                        slot => *slot = Some(gi),
                    }
                }
            }
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g)?,
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_f64(&[3], &[1., 2., 3.]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2., 4., 6.]);
    }

    #[test]
    fn unreachable_param_keeps_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::ones(&[2]));
        let y = tape.param(Tensor::ones(&[2]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(y).is_none());
        assert_eq!(tape.grad_or_zeros(y), Tensor::zeros(&[2]));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_f64(&[2], &[1., -1.]).unwrap());
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2., 2.]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::ones(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Argument(_))));
        let mut empty = Tape::<f64>::new();
        assert!(empty.backward(Var(0)).is_err());
    }
}
