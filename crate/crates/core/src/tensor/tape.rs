use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Single,
    Double,
}

/// Read access to recorded values from inside a backward rule.
pub struct Values<'a>(&'a [Node]);

impl Values<'_> {
    pub fn get(&self, v: Var) -> &Tensor {
        &self.0[v.0].value
    }
}

type BackwardFn = Box<dyn Fn(&Tensor, &Values<'_>) -> Vec<(Var, Tensor)>>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Linear record of operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every input id is smaller than
/// the id of its consumer and the backward sweep is a single reverse scan.
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new(Precision::Double)
    }
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape {
            nodes: Vec::new(),
            precision,
            grad_enabled: true,
        }
    }

    /// A tape that computes values but records no backward rules.
    pub fn inference(precision: Precision) -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new(precision)
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let value = self.round(value);
        self.nodes.push(Node {
            value,
            requires_grad: requires_grad && self.grad_enabled,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an op output. `backward` maps the output gradient to
    /// gradients for (a subset of) `inputs`; it is dropped when no input needs
    /// a gradient.
    pub fn push_op<F>(
        &mut self,
        op: &'static str,
        value: Tensor,
        inputs: &[Var],
        backward: F,
    ) -> Result<Var>
    where
        F: Fn(&Tensor, &Values<'_>) -> Vec<(Var, Tensor)> + 'static,
    {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let value = self.round(value);
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn round(&self, mut value: Tensor) -> Tensor {
        if self.precision == Precision::Single {
            for v in value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        value
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let value = self.value(output);
        if value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must be scalar, has shape {:?}", value.shape()),
            ));
        }
        self.backward_with(output, Tensor::new(value.shape().to_vec(), vec![1.0])?)
    }

    /// Reverse sweep seeded with an explicit output gradient.
    pub fn backward_with(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(output).shape() {
            return Err(Error::shape("backward", "seed shape differs from output"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        let values = Values(&self.nodes);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            let Some(g) = grads[i].take() else { continue };
            match &node.backward {
                Some(rule) => {
                    for (input, gi) in rule(&g, &values) {
                        if !self.nodes[input.0].requires_grad {
                            continue;
                        }
                        debug_assert_eq!(gi.shape(), self.nodes[input.0].value.shape());
                        match &mut grads[input.0] {
                            Some(acc) => acc.add_assign(&gi),
                            slot => *slot = Some(gi),
                        }
                    }
                }
                None => {
                    // leaves keep their gradient
                    grads[i] = Some(g);
                }
            }
        }
        let mut out = Gradients { grads };
        for (i, g) in out.grads.iter_mut().enumerate() {
            let keep = self.nodes[i].backward.is_none() && self.nodes[i].requires_grad;
            if !keep {
                *g = None;
            } else if let Some(t) = g {
                if !t.is_finite() {
                    return Err(Error::NonFinite { op: "backward" });
                }
            }
        }
        Ok(out)
    }
}

/// Gradients of leaf parameters after a backward sweep.
#[derive(Debug, Default)]
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
