//! The reverse-mode tape: an arena of nodes appended in execution order.

use super::Tensor;
use crate::{Error, Result, Scalar};

/// Handle to a value living on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Val(pub(crate) usize);

/// Backward rule: receives the node's upstream adjoint and the context,
/// and deposits adjoint contributions into the node's parents.
type BackFn<F> = Box<dyn Fn(&[F], &mut Ctx<'_, F>)>;

pub(crate) struct Node<F: Scalar> {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<F>,
    /// True if this node (or any ancestor) asked for gradients.
    pub(crate) requires_grad: bool,
    /// `None` for leaves and constants.
    backward: Option<BackFn<F>>,
}

/// Accumulation context handed to backward rules.
pub struct Ctx<'a, F: Scalar> {
    nodes: &'a [Node<F>],
    grads: &'a mut [Option<Vec<F>>],
}

impl<'a, F: Scalar> Ctx<'a, F> {
    /// Forward value of a node.
    pub fn value(&self, v: Val) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Val) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Whether anything upstream of `v` wants a gradient; backward rules
    /// use this to skip expensive adjoint computations for constants.
    pub fn needs_grad(&self, v: Val) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Add `delta` into the adjoint of `v` (no-op when `v` is a constant).
    pub fn accumulate(&mut self, v: Val, delta: &[F]) {
        self.accumulate_with(v, |buf| {
            for (b, d) in buf.iter_mut().zip(delta) {
                *b = *b + *d;
            }
        });
    }

    /// Zero-initialize the adjoint of `v` if absent, then let the caller
    /// add into it in place.
    pub fn accumulate_with(&mut self, v: Val, add: impl FnOnce(&mut [F])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let buf = self.grads[v.0].get_or_insert_with(|| vec![F::zero(); len]);
        add(buf);
    }

    /// Like [`Ctx::accumulate_with`], but also hands the callback the
    /// forward value of `read` (which may be any node, including the op's
    /// own output). Avoids cloning values inside backward rules.
    pub fn accumulate_using(&mut self, target: Val, read: Val, add: impl FnOnce(&[F], &mut [F])) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let len = self.nodes[target.0].value.len();
        let buf = self.grads[target.0].get_or_insert_with(|| vec![F::zero(); len]);
        add(&self.nodes[read.0].value, buf);
    }
}

/// Define-by-run gradient tape. Operations append nodes; [`Tape::backward`]
/// replays them in reverse, summing adjoints across fan-out.
pub struct Tape<F: Scalar> {
    pub(crate) nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Place a tensor on the tape as a leaf, honoring its grad request.
    pub fn leaf(&mut self, t: &Tensor<F>) -> Val {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Place a non-differentiable constant on the tape.
    pub fn constant(&mut self, t: &Tensor<F>) -> Val {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), false)
    }

    /// Place raw parts on the tape as a leaf.
    pub fn push_leaf(&mut self, shape: Vec<usize>, value: Vec<F>, requires_grad: bool) -> Val {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, requires_grad, backward: None });
        Val(self.nodes.len() - 1)
    }

    /// Append an op node with a backward rule. The rule is dropped when no
    /// parent wants gradients, so dead subgraphs cost nothing on the way
    /// back.
    pub(crate) fn custom_op(
        &mut self,
        shape: Vec<usize>,
        value: Vec<F>,
        parents: &[Val],
        backward: BackFn<F>,
    ) -> Val {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            backward: if requires_grad { Some(backward) } else { None },
        });
        Val(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Val) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Val) -> &[F] {
        &self.nodes[v.0].value
    }

    /// Copy a node's value out as a tensor.
    pub fn tensor(&self, v: Val) -> Tensor<F> {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].value.clone())
            .expect("node shape/value always consistent")
    }

    /// Reverse pass from a scalar node. Clears any previous adjoints, seeds
    /// the loss adjoint with 1, then visits nodes in reverse insertion
    /// order. Adjoints accumulate additively, so values used several times
    /// receive the sum of all their downstream contributions.
    pub fn backward(&mut self, loss: Val) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if !self.nodes[loss.0].value[0].is_finite() {
            return Err(Error::NonFinite { op: "backward (loss)" });
        }
        self.grads.clear();
        self.grads.resize(self.nodes.len(), None);
        self.grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            if let Some(bw) = self.nodes[i].backward.take() {
                let upstream = self.grads[i].clone().expect("checked above");
                {
                    let mut ctx = Ctx { nodes: &self.nodes, grads: &mut self.grads };
                    bw(&upstream, &mut ctx);
                }
                self.nodes[i].backward = Some(bw);
            }
        }
        Ok(())
    }

    /// Adjoint of a node after [`Tape::backward`]. `None` when the node is
    /// a constant or no gradient path reached it.
    pub fn grad(&self, v: Val) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adjoint of a node, zero-filled when no gradient path reached it.
    pub fn grad_or_zeros(&self, v: Val) -> Vec<F> {
        match self.grad(v) {
            Some(g) => g.to_vec(),
            None => vec![F::zero(); self.nodes[v.0].value.len()],
        }
    }
}
