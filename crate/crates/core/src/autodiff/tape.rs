use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Local vector-Jacobian product of one recorded operation.
///
/// `backward` receives the values of the op's inputs (in recording order), its
/// own output value, and the upstream gradient; it returns one gradient per
/// input with the input's shape.
pub(crate) trait Op {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

enum Kind {
    Leaf,
    Constant,
    Op {
        op: Box<dyn Op>,
        inputs: Vec<NodeId>,
    },
}

struct Node {
    value: Tensor,
    kind: Kind,
    requires_grad: bool,
}

/// Records a computation graph. Nodes are appended in evaluation order, so the
/// recording order is a topological order and the backward sweep simply walks
/// it in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input (parameter or data we want gradients for).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push_node(value, Kind::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_node(value, Kind::Constant, false)
    }

    /// Copy of `id`'s value cut off from the graph.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let value = self.value(id).clone();
        self.constant(value)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id).item()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        match &self.nodes[id.0].kind {
            Kind::Leaf => "leaf",
            Kind::Constant => "constant",
            Kind::Op { op, .. } => op.name(),
        }
    }

    pub(crate) fn record(&mut self, op: impl Op + 'static, inputs: &[NodeId], value: Tensor) -> NodeId {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        self.push_node(
            value,
            Kind::Op {
                op: Box::new(op),
                inputs: inputs.to_vec(),
            },
            requires_grad,
        )
    }

    fn push_node(&mut self, value: Tensor, kind: Kind, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            kind,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `root`. Returns the gradient of `root` with
    /// respect to every leaf that it depends on.
    pub fn backward(&self, root: NodeId) -> Result<GradientMap> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(root_value.shape().to_vec(), vec![1.0]));
        let mut leaves = BTreeMap::new();

        for idx in (0..=root.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.kind {
                Kind::Constant => {}
                Kind::Leaf => {
                    leaves.insert(NodeId(idx), grad);
                }
                Kind::Op { op, inputs } => {
                    if !node.requires_grad {
                        continue;
                    }
                    let input_values: Vec<&Tensor> =
                        inputs.iter().map(|&i| &self.nodes[i.0].value).collect();
                    let input_grads = op.backward(&input_values, &node.value, &grad);
                    debug_assert_eq!(input_grads.len(), inputs.len());
                    for (&input, g) in inputs.iter().zip(input_grads) {
                        if !self.nodes[input.0].requires_grad {
                            continue;
                        }
                        debug_assert_eq!(g.shape(), self.nodes[input.0].value.shape(), "{}", op.name());
                        if g.data().iter().any(|v| v.is_nan()) {
                            return Err(Error::NanGradient {
                                op: op.name(),
                                node: idx,
                            });
                        }
                        match &mut grads[input.0] {
                            Some(acc) => acc.add_assign(&g),
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
            }
        }
        Ok(GradientMap { grads: leaves })
    }
}

/// Gradients keyed by leaf. Leaves the root does not depend on are absent and
/// read back as zeros through [`GradientMap::get_or_zeros`].
#[derive(Debug, Default)]
pub struct GradientMap {
    grads: BTreeMap<NodeId, Tensor>,
}

impl GradientMap {
    pub fn get(&self, leaf: NodeId) -> Option<&Tensor> {
        self.grads.get(&leaf)
    }

    pub fn get_or_zeros(&self, tape: &Tape, leaf: NodeId) -> Tensor {
        self.grads
            .get(&leaf)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros_like(tape.value(leaf)))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &Tensor)> {
        self.grads.iter()
    }
}
