//! Tape of recorded operations and the reverse sweep over it.

use crate::error::{AutodiffError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Lengths of consecutive independent sequences stacked along the rows of a
/// matrix. Sequence ops (attention, convolution, pooling) never mix rows of
/// different segments.
pub type Segments = Vec<usize>;

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulScalarVar(Var, Var),
    Affine(Var, f32),
    Tanh(Var),
    Gelu(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Recip(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SegmentMean { x: Var, segments: Segments },
    RepeatRows { x: Var, segments: Segments },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, inv_std: Vec<f32> },
    Attention { q: Var, k: Var, v: Var, heads: usize, segments: Segments, probs: Vec<f32> },
    Conv1d { x: Var, w: Var, b: Var, segments: Segments, width: usize, cols: Vec<f32> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    IndexRows { x: Var, idx: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f32> },
    Cosine { a: Var, b: Var, na: f32, nb: f32 },
    NormalizeRows { x: Var, norms: Vec<f32> },
    GradReverse { x: Var, scale: f32 },
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

/// Records one forward pass. Nodes are appended in evaluation order, which
/// is therefore a valid topological order for the reverse sweep.
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    param_vars: Vec<(ParamId, Var)>,
    consumed: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable parameter. Repeated calls for the same id return the same
    /// node so all uses accumulate into one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.param_vars.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.param_vars.push((id, v));
        v
    }

    /// Parameter value as a constant (gradient-stopped copy).
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.constant(store.get(id).clone())
    }

    /// Copy of `v`'s value cut from the graph.
    pub fn stop_gradient(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Runs the reverse sweep from a scalar `loss`, consuming the graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(AutodiffError::GraphConsumed);
        }
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(shape));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(&shape, 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            if !matches!(self.nodes[i].op, Op::Leaf) {
                crate::backward::propagate(self, i, &upstream, &mut grads);
            }
            grads[i] = Some(upstream);
        }
        Ok(Gradients {
            grads,
            params: self.param_vars.clone(),
        })
    }

    /// Gradients of `loss` with respect to `wrt`; unreachable inputs get zeros.
    pub fn grad(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let shapes: Vec<Vec<usize>> = wrt.iter().map(|v| self.shape(*v).to_vec()).collect();
        let g = self.backward(loss)?;
        Ok(wrt
            .iter()
            .zip(shapes)
            .map(|(v, s)| g.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(&s)))
            .collect())
    }
}

pub(crate) fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for every parameter in `store`; parameters that did not
    /// take part in the graph get a zero tensor.
    pub fn for_params(&self, store: &ParamStore) -> Vec<(ParamId, Tensor)> {
        store
            .ids()
            .map(|id| {
                let g = self
                    .params
                    .iter()
                    .find(|(p, _)| *p == id)
                    .and_then(|(_, v)| self.get(*v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
                (id, g)
            })
            .collect()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.get(*v))
    }
}
