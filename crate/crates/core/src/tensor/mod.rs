//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! Every operation that participates in training builds a graph of nodes
//! linked through `Arc` parents. Calling [`Tensor::backward`] walks that
//! graph in reverse topological order and accumulates gradients for all
//! `requires_grad` leaves. Element type is generic: `f32` for training,
//! `f64` for the oracle and finite-difference test suites.

mod conv;
mod ops;
mod sample;

pub use conv::*;
pub use ops::*;
pub use sample::*;

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

/// Scalar element type for tensors.
pub trait Element:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumAssign
    + Send
    + Sync
    + Default
    + fmt::Debug
    + fmt::Display
    + 'static
{
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Element for f32 {
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

static NEXT_LEAF_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) type BackFn<E> = Box<dyn Fn(&[E]) -> Vec<Option<Vec<E>>> + Send + Sync>;

pub(crate) struct Node<E: Element> {
    pub data: Vec<E>,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
    pub leaf_id: Option<u64>,
    pub parents: Vec<Tensor<E>>,
    pub backward: Option<BackFn<E>>,
}

/// A dense n-dimensional array. Cheap to clone (shared storage), immutable
/// after construction except through ops.
pub struct Tensor<E: Element> {
    inner: Arc<Node<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl<E: Element> Tensor<E> {
    pub fn new(data: Vec<E>, shape: &[usize]) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            inner: Arc::new(Node {
                data,
                shape: shape.to_vec(),
                requires_grad: false,
                leaf_id: None,
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// A gradient-tracked leaf (parameter or probed input).
    pub fn leaf(data: Vec<E>, shape: &[usize]) -> Self {
        let id = NEXT_LEAF_ID.fetch_add(1, Ordering::Relaxed);
        Self::leaf_with_id(data, shape, id)
    }

    pub(crate) fn leaf_with_id(data: Vec<E>, shape: &[usize], id: u64) -> Self {
        assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor {
            inner: Arc::new(Node {
                data,
                shape: shape.to_vec(),
                requires_grad: true,
                leaf_id: Some(id),
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    pub(crate) fn from_op(
        data: Vec<E>,
        shape: Vec<usize>,
        parents: Vec<Tensor<E>>,
        backward: BackFn<E>,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.inner.requires_grad);
        assert_eq!(data.len(), shape.iter().product::<usize>());
        if requires_grad {
            Tensor {
                inner: Arc::new(Node {
                    data,
                    shape,
                    requires_grad: true,
                    leaf_id: None,
                    parents,
                    backward: Some(backward),
                }),
            }
        } else {
            // No gradient consumer upstream: drop the graph edges.
            Tensor {
                inner: Arc::new(Node {
                    data,
                    shape,
                    requires_grad: false,
                    leaf_id: None,
                    parents: Vec::new(),
                    backward: None,
                }),
            }
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::new(vec![E::zero(); shape.iter().product()], shape)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::new(vec![E::one(); shape.iter().product()], shape)
    }

    pub fn full(shape: &[usize], v: E) -> Self {
        Tensor::new(vec![v; shape.iter().product()], shape)
    }

    pub fn scalar(v: E) -> Self {
        Tensor::new(vec![v], &[1])
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn leaf_id(&self) -> Option<u64> {
        self.inner.leaf_id
    }

    /// Single stored value of a 1-element tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.inner.data[0]
    }

    /// Detached copy: same data, no graph history, not a leaf.
    pub fn detach(&self) -> Self {
        Tensor::new(self.inner.data.clone(), &self.inner.shape)
    }

    /// Re-tag this tensor's data as a fresh gradient-tracked leaf.
    pub fn requires_grad_leaf(&self) -> Self {
        Tensor::leaf(self.inner.data.clone(), &self.inner.shape)
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor::new(
            self.inner.data.iter().map(|v| F::of_f64(v.as_f64())).collect(),
            &self.inner.shape,
        )
    }

    pub fn is_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, ctx: &str) -> Result<()> {
        match self.inner.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!("{ctx}: element {i} of shape {:?}", self.shape()))),
        }
    }

    fn key(&self) -> usize {
        Arc::as_ptr(&self.inner) as usize
    }

    /// Reverse-mode sweep seeded with ones over this tensor.
    pub fn backward(&self) -> Gradients<E> {
        self.backward_with_seed(&vec![E::one(); self.numel()])
    }

    pub fn backward_with_seed(&self, seed: &[E]) -> Gradients<E> {
        assert_eq!(seed.len(), self.numel());
        // Iterative post-order DFS for a reverse topological order.
        let mut order: Vec<Tensor<E>> = Vec::new();
        let mut visited: HashMap<usize, ()> = HashMap::new();
        let mut stack: Vec<(Tensor<E>, usize)> = vec![(self.clone(), 0)];
        while let Some((node, child_idx)) = stack.pop() {
            if child_idx == 0 {
                if visited.contains_key(&node.key()) {
                    continue;
                }
                visited.insert(node.key(), ());
            }
            if child_idx < node.inner.parents.len() {
                let parent = node.inner.parents[child_idx].clone();
                stack.push((node, child_idx + 1));
                if parent.inner.requires_grad && !visited.contains_key(&parent.key()) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }

        let mut grads: HashMap<usize, Vec<E>> = HashMap::new();
        grads.insert(self.key(), seed.to_vec());
        let mut leaf_grads: HashMap<u64, Vec<E>> = HashMap::new();

        for node in order.iter().rev() {
            let Some(grad) = grads.remove(&node.key()) else {
                continue;
            };
            if let Some(id) = node.inner.leaf_id {
                let entry = leaf_grads.entry(id).or_insert_with(|| vec![E::zero(); grad.len()]);
                for (a, g) in entry.iter_mut().zip(grad.iter()) {
                    *a += *g;
                }
                continue;
            }
            if let Some(back) = &node.inner.backward {
                let parent_grads = back(&grad);
                assert_eq!(parent_grads.len(), node.inner.parents.len());
                for (parent, pg) in node.inner.parents.iter().zip(parent_grads) {
                    if !parent.inner.requires_grad {
                        continue;
                    }
                    if let Some(pg) = pg {
                        assert_eq!(pg.len(), parent.numel());
                        let entry = grads
                            .entry(parent.key())
                            .or_insert_with(|| vec![E::zero(); parent.numel()]);
                        for (a, g) in entry.iter_mut().zip(pg.iter()) {
                            *a += *g;
                        }
                    }
                }
            }
        }

        Gradients { by_leaf: leaf_grads }
    }
}

/// Gradients of all `requires_grad` leaves reached by a backward sweep.
pub struct Gradients<E: Element> {
    by_leaf: HashMap<u64, Vec<E>>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, t: &Tensor<E>) -> Option<&[E]> {
        t.leaf_id().and_then(|id| self.by_leaf.get(&id)).map(|v| v.as_slice())
    }

    pub fn get_by_id(&self, id: u64) -> Option<&[E]> {
        self.by_leaf.get(&id).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = acc;
        acc *= shape[i];
    }
    strides
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_grad_accumulates_over_multiple_uses() {
        let x = Tensor::<f64>::leaf(vec![3.0], &[1]);
        let y = x.mul(&x).unwrap(); // x^2 -> dy/dx = 2x = 6
        let g = y.backward();
        assert_eq!(g.get(&x).unwrap(), &[6.0]);
    }

    #[test]
    fn no_grad_path_prunes_graph() {
        let a = Tensor::<f64>::new(vec![1.0, 2.0], &[2]);
        let b = Tensor::<f64>::new(vec![3.0, 4.0], &[2]);
        let c = a.add(&b).unwrap();
        assert!(!c.requires_grad());
        assert!(c.inner.parents.is_empty());
    }

    #[test]
    fn detach_blocks_gradient() {
        let x = Tensor::<f64>::leaf(vec![2.0], &[1]);
        let y = x.mul(&x).unwrap().detach().mul(&x).unwrap();
        let g = y.backward();
        // only the outer multiplication contributes: d(4*x)/dx = 4
        assert_eq!(g.get(&x).unwrap(), &[4.0]);
    }
}
