//! Minimal reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every value produced during a forward pass together
//! with a closure that maps the gradient of that value onto its parents.
//! Nodes are appended in evaluation order, so a single reverse sweep over the
//! node list is a valid topological traversal.
//!
//! Tapes built with [`Tape::inference`] store values only; no closures are
//! kept and [`Tape::backward`] returns no gradients.

mod conv;
mod ops;

use ndarray::{ArrayD, IxDyn};

pub use conv::conv_output_size;
pub use ops::BatchStats;

pub type Tensor = ArrayD<f64>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward closure: receives the upstream gradient and a per-parent flag
/// saying whether that parent needs a gradient at all.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that records backward closures.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape for forward-only evaluation.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable leaf (a parameter or an input we want gradients for).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let requires_grad = self.recording;
        self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        })
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        })
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "item() on a tensor with {} elements", t.len());
        *t.iter().next().unwrap()
    }

    /// Records an operation whose forward value has already been computed.
    ///
    /// `backward` must return one entry per parent, in order. The closure is
    /// dropped when the tape is not recording or no parent needs a gradient.
    pub fn custom<F>(&mut self, parents: &[Var], value: Tensor, backward: F) -> Var
    where
        F: Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        let requires_grad = self.recording && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let backward: Option<BackwardFn> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        self.push(Node {
            value,
            parents: parents.to_vec(),
            backward,
            requires_grad,
        })
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let root_value = self.value(root);
        assert_eq!(root_value.len(), 1, "backward() requires a scalar root");
        if !self.nodes[root.0].requires_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(ArrayD::ones(root_value.raw_dim()));

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].requires_grad)
                .collect();
            let parent_grads = backward(&upstream, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((parent, g), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                if !need {
                    continue;
                }
                let Some(g) = g else { continue };
                debug_assert_eq!(
                    g.shape(),
                    self.nodes[parent.0].value.shape(),
                    "gradient shape mismatch for node {}",
                    parent.0
                );
                match &mut grads[parent.0] {
                    Some(acc) => *acc += &g,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Gradients { grads }
    }
}

/// Gradients of a scalar root with respect to every node that needed one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub mod gradcheck {
    //! Central finite differences for checking hand-written backward passes.
    use super::*;

    /// Builds the graph with `build` on fresh tapes, compares the analytic
    /// gradient of every input against central differences, and returns the
    /// worst relative error.
    pub fn max_relative_error<F>(inputs: &[Tensor], build: F, h: f64) -> f64
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out);

        let eval = |inputs: &[Tensor]| {
            let mut tape = Tape::inference();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            let out = build(&mut tape, &vars);
            tape.item(out)
        };

        let mut worst: f64 = 0.0;
        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[i])
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(input.raw_dim()));
            for j in 0..input.len() {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                plus[i].as_slice_mut().unwrap()[j] += h;
                minus[i].as_slice_mut().unwrap()[j] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[j];
                let err = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-6));
                worst = worst.max(err);
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn inference_tape_keeps_no_gradients() {
        let mut tape = Tape::inference();
        let a = tape.leaf(arr1(&[1.0, 2.0]).into_dyn());
        let s = tape.sum(a);
        let grads = tape.backward(s);
        assert!(grads.get(a).is_none());
    }

    #[test]
    fn shared_parent_accumulates() {
        let mut tape = Tape::new();
        let a = tape.leaf(arr1(&[1.0, -2.0, 3.0]).into_dyn());
        let b = tape.mul(a, a);
        let c = tape.add(b, a);
        let s = tape.sum(c);
        let grads = tape.backward(s);
        let g = grads.get(a).unwrap();
        assert_eq!(g.as_slice().unwrap(), &[3.0, -3.0, 7.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(arr1(&[1.0]).into_dyn());
        let k = tape.constant(arr1(&[4.0]).into_dyn());
        let p = tape.mul(a, k);
        let s = tape.sum(p);
        let grads = tape.backward(s);
        assert_eq!(grads.get(a).unwrap()[[0]], 4.0);
        assert!(grads.get(k).is_none());
    }
}
