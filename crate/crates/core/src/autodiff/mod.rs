//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Every operation is evaluated eagerly and appended to a [`Tape`]. The tape
//! is append-only, so node order is already a topological order; `backward`
//! walks it once in reverse, accumulating adjoints into a [`Gradients`] table.
//! A tape can be replayed only once.
//!
//! ```
//! use pact_core::autodiff::Tape;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(vec![3.0], &[1]).unwrap();
//! let y = x.mul(x).unwrap().sum();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x), vec![6.0]);
//! ```

mod conv;
mod ops;

use std::cell::RefCell;
use std::fmt;

use crate::error::{Error, Result};

pub use conv::ConvGeometry;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before a logit.
pub const PROB_EPS: f64 = 1e-6;

pub type NodeId = usize;

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Constant,
    StopGradient,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScaleBy { x: NodeId, s: NodeId },
    AddScalar { x: NodeId, s: NodeId },
    Affine { x: NodeId, mul: f64 },
    MatMul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Conv3x3 { input: NodeId, kernel: NodeId, geom: ConvGeometry },
    GlobalAvgPool { input: NodeId, channels: usize, plane: usize },
    Sigmoid(NodeId),
    LogSigmoid(NodeId),
    Tanh(NodeId),
    Logit(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    LogSoftmax(NodeId),
    SoftmaxCrossEntropy { logits: NodeId, target: usize },
    MaxConst { x: NodeId, c: f64 },
    Reshape(NodeId),
    Pick { x: NodeId, index: usize },
    TileChannels { x: NodeId, channels: usize },
    ChannelBias { x: NodeId, bias: NodeId, plane: usize },
    PatchMean { x: NodeId, h: usize, w: usize, n: usize },
    PatchExpand { x: NodeId, gw: usize, n: usize },
    Concat(Vec<NodeId>),
}

pub(crate) struct Node {
    pub(crate) value: Vec<f64>,
    pub(crate) shape: Vec<usize>,
    pub(crate) op: Op,
    /// Whether any leaf upstream of this node can receive an adjoint.
    pub(crate) tracked: bool,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Append-only record of one forward pass.
///
/// A tape belongs to one execution context; independent tapes may be driven
/// from different threads.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tape")
            .field("nodes", &inner.nodes.len())
            .field("consumed", &inner.consumed)
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input; its adjoint is retained after `backward`.
    pub fn leaf(&self, values: Vec<f64>, shape: &[usize]) -> Result<Var<'_>> {
        check_fill(&values, shape)?;
        Ok(self.push(values, shape.to_vec(), Op::Leaf, true))
    }

    /// A value that never receives an adjoint.
    pub fn constant(&self, values: Vec<f64>, shape: &[usize]) -> Result<Var<'_>> {
        check_fill(&values, shape)?;
        Ok(self.push(values, shape.to_vec(), Op::Constant, false))
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.push(vec![value], vec![1], Op::Constant, false)
    }

    pub fn zeros(&self, shape: &[usize]) -> Var<'_> {
        self.push(vec![0.0; numel(shape)], shape.to_vec(), Op::Constant, false)
    }

    pub(crate) fn push(&self, value: Vec<f64>, shape: Vec<usize>, op: Op, tracked: bool) -> Var<'_> {
        debug_assert_eq!(value.len(), numel(&shape));
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            shape,
            op,
            tracked,
        });
        Var { tape: self, id }
    }

    pub(crate) fn with_node<R>(&self, id: NodeId, f: impl FnOnce(&Node) -> R) -> R {
        let inner = self.inner.borrow();
        f(&inner.nodes[id])
    }

    pub(crate) fn with_nodes<R>(&self, f: impl FnOnce(&[Node]) -> R) -> R {
        let inner = self.inner.borrow();
        f(&inner.nodes)
    }

    /// Propagates adjoints from a scalar `root` to every tracked node.
    ///
    /// Fails if the root is not a scalar or the tape was already replayed.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(root.tape, self) {
            return Err(Error::ForeignTape);
        }
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::TapeConsumed);
        }
        let root_shape = inner.nodes[root.id].shape.clone();
        if numel(&root_shape) != 1 {
            return Err(Error::NonScalarRoot(root_shape));
        }
        inner.consumed = true;

        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root.id] = Some(vec![1.0]);
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if nodes[id].tracked {
                ops::backprop(id, &g, nodes, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn check_fill(values: &[f64], shape: &[usize]) -> Result<()> {
    if values.len() != numel(shape) {
        return Err(Error::BadShape {
            shape: shape.to_vec(),
            values: values.len(),
        });
    }
    Ok(())
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.tape.with_node(self.id, |n| {
            f.debug_struct("Var")
                .field("id", &self.id)
                .field("shape", &n.shape)
                .field("value", &n.value)
                .finish()
        })
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_node(self.id, |n| n.shape.clone())
    }

    pub fn numel(&self) -> usize {
        self.tape.with_node(self.id, |n| n.value.len())
    }

    pub fn value(&self) -> Vec<f64> {
        self.tape.with_node(self.id, |n| n.value.clone())
    }

    /// First element; intended for scalars.
    pub fn item(&self) -> f64 {
        self.tape.with_node(self.id, |n| n.value[0])
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.with_node(self.id, |n| n.tracked)
    }

    pub fn backward(&self) -> Result<Gradients> {
        self.tape.backward(*self)
    }
}

/// Adjoints produced by one backward pass, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Adjoint of `var`, or zeros if nothing flowed into it.
    pub fn wrt(&self, var: Var<'_>) -> Vec<f64> {
        match self.get(var) {
            Some(g) => g.to_vec(),
            None => vec![0.0; var.numel()],
        }
    }
}
