//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Operations on [`Tensor`]s that carry a node handle are recorded on a
//! [`Graph`] (a tape in topological order). [`grad`] and [`backward`] walk the
//! tape from a scalar root back to the requested leaves.
//!
//! Every backward rule is written in terms of the same tensor operations used
//! in the forward pass. In [`Mode::HigherOrder`] the backward pass therefore
//! records onto the tape as well, and the gradients it returns can be
//! differentiated again. This is what makes second-order meta-gradients
//! (differentiating through an inner gradient step) possible. In
//! [`Mode::FirstOrder`] the rules run on detached values and nothing new is
//! recorded.
//!
//! A graph is confined to the thread that created it. [`Array`] values carry
//! no graph handle and are `Send + Sync`.

mod array;
mod backward;
mod gradcheck;
mod ops;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

pub use array::Array;
#[cfg(any(test, feature = "fault-injection"))]
pub use backward::with_fault;
pub use backward::{backward, grad};
pub use gradcheck::{gradcheck, max_relative_error, relative_error};
pub use ops::{OpKind, BN_EPS, GATHER_ZERO};

use crate::error::{Error, Result};
use ops::Op;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Backward rules run on detached values; returned gradients are constants.
    FirstOrder,
    /// Backward rules record onto the graph; returned gradients are differentiable.
    HigherOrder,
}

struct Node {
    value: Array,
    op: Op,
    inputs: Vec<usize>,
    requires_grad: bool,
}

struct Tape {
    mode: Mode,
    nodes: Vec<Node>,
}

impl Tape {
    fn push(&mut self, node: Node) -> usize {
        self.nodes.push(node);
        self.nodes.len() - 1
    }
}

/// Differentiation graph. Cloning yields another handle to the same tape.
#[derive(Clone)]
pub struct Graph {
    tape: Rc<RefCell<Tape>>,
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Graph {
            tape: Rc::new(RefCell::new(Tape {
                mode,
                nodes: Vec::new(),
            })),
        }
    }

    pub fn mode(&self) -> Mode {
        self.tape.borrow().mode
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.tape.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a leaf that gradients can be taken with respect to.
    pub fn param(&self, value: Array) -> Tensor {
        self.leaf(value, true)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&self, value: Array) -> Tensor {
        self.leaf(value, false)
    }

    fn leaf(&self, value: Array, requires_grad: bool) -> Tensor {
        let id = self.tape.borrow_mut().push(Node {
            value: value.clone(),
            op: Op::Leaf,
            inputs: Vec::new(),
            requires_grad,
        });
        Tensor {
            value,
            node: Some(NodeRef {
                graph: self.clone(),
                id,
                requires_grad,
            }),
        }
    }

    fn same(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.tape, &other.tape)
    }

    /// Handle to node `id`, detached in first-order mode.
    fn handle(&self, id: usize, higher_order: bool) -> Tensor {
        let tape = self.tape.borrow();
        let node = &tape.nodes[id];
        let value = node.value.clone();
        if higher_order {
            Tensor {
                value,
                node: Some(NodeRef {
                    graph: self.clone(),
                    id,
                    requires_grad: node.requires_grad,
                }),
            }
        } else {
            Tensor::from(value)
        }
    }
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tape = self.tape.borrow();
        f.debug_struct("Graph")
            .field("mode", &tape.mode)
            .field("nodes", &tape.nodes.len())
            .finish()
    }
}

#[derive(Clone)]
struct NodeRef {
    graph: Graph,
    id: usize,
    requires_grad: bool,
}

/// A value that may participate in a differentiation graph.
///
/// A tensor without a node handle is a plain constant and never receives a
/// gradient. Operations on tensors are recorded whenever at least one input
/// has a node handle.
#[derive(Clone)]
pub struct Tensor {
    value: Array,
    node: Option<NodeRef>,
}

impl From<Array> for Tensor {
    fn from(value: Array) -> Self {
        Tensor { value, node: None }
    }
}

impl Tensor {
    pub fn scalar(value: f64) -> Self {
        Tensor::from(Array::scalar(value))
    }

    pub fn value(&self) -> &Array {
        &self.value
    }

    pub fn into_value(self) -> Array {
        self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn rank(&self) -> usize {
        self.value.rank()
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn item(&self) -> Result<f64> {
        self.value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.as_ref().is_some_and(|n| n.requires_grad)
    }

    pub fn is_attached(&self) -> bool {
        self.node.is_some()
    }

    pub fn graph(&self) -> Option<&Graph> {
        self.node.as_ref().map(|n| &n.graph)
    }

    /// Same value, no node handle.
    pub fn detach(&self) -> Tensor {
        Tensor::from(self.value.clone())
    }

    fn node_id(&self) -> Option<usize> {
        self.node.as_ref().map(|n| n.id)
    }

    /// Records `op` applied to `inputs` producing `value`.
    fn record(op: Op, inputs: &[&Tensor], value: Array) -> Result<Tensor> {
        let mut graph: Option<&Graph> = None;
        for t in inputs {
            if let Some(n) = &t.node {
                match graph {
                    None => graph = Some(&n.graph),
                    Some(g) if !g.same(&n.graph) => {
                        return Err(Error::Usage(format!(
                            "{}: inputs belong to different graphs",
                            op.kind().name()
                        )))
                    }
                    Some(_) => {}
                }
            }
        }
        let Some(graph) = graph else {
            return Ok(Tensor::from(value));
        };
        let requires_grad = inputs.iter().any(|t| t.requires_grad());
        let mut tape = graph.tape.borrow_mut();
        let ids = inputs
            .iter()
            .map(|t| match t.node_id() {
                Some(id) => id,
                None => tape.push(Node {
                    value: t.value.clone(),
                    op: Op::Leaf,
                    inputs: Vec::new(),
                    requires_grad: false,
                }),
            })
            .collect();
        let id = tape.push(Node {
            value: value.clone(),
            op,
            inputs: ids,
            requires_grad,
        });
        Ok(Tensor {
            value,
            node: Some(NodeRef {
                graph: graph.clone(),
                id,
                requires_grad,
            }),
        })
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.node {
            Some(n) => write!(f, "Tensor(#{} {:?})", n.id, self.value),
            None => write!(f, "Tensor({:?})", self.value),
        }
    }
}
