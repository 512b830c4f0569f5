//! Reverse-mode differentiation tape.
//!
//! Every high-level operation (matmul, softmax, convolution, ...) appends one
//! record holding its output value, the records it consumed and a closure that
//! maps the output gradient to one gradient per input. Records are appended in
//! execution order, so the tape is always topologically sorted and a single
//! reverse sweep visits each record exactly once.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Handle to a record on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Maps the gradient of a record's output to gradients of its inputs, in the
/// order the inputs were passed to [`Tape::record`]. `None` means "no
/// contribution".
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    requires_grad: bool,
    is_leaf: bool,
    backward: Option<BackwardFn<T>>,
}

pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    backward_done: Cell<bool>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            backward_done: Cell::new(false),
        }
    }

    /// Number of records.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Drops all records and re-arms [`Tape::backward`].
    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
        self.backward_done.set(false);
    }

    /// A trainable input: receives a gradient from [`Tape::backward`].
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            requires_grad: true,
            is_leaf: true,
            backward: None,
        })
    }

    /// A non-trainable input.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            requires_grad: false,
            is_leaf: true,
            backward: None,
        })
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Appends an operation record. The backward closure is dropped when none
    /// of the inputs needs a gradient.
    pub fn record<F>(&self, inputs: &[Var], value: Tensor<T>, backward: F) -> Var
    where
        F: Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        debug_assert!(
            value.is_finite(),
            "non-finite value produced by a tape operation"
        );
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.0].requires_grad)
        };
        self.push(Node {
            value: Rc::new(value),
            parents: inputs.iter().map(|v| v.0).collect(),
            requires_grad,
            is_leaf: false,
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn<T>),
        })
    }

    fn push(&self, node: Node<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// Propagates gradients from a scalar `loss` to every trainable leaf.
    ///
    /// Leaves the loss does not depend on receive an all-zero gradient. A tape
    /// can be differentiated once; call [`Tape::reset`] before reusing it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.backward_done.get() {
            return Err(Error::BackwardAlreadyRun);
        }
        let nodes = self.nodes.borrow();
        let loss_shape = nodes[loss.0].value.shape();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::NotScalar(loss_shape.to_vec()));
        }
        self.backward_done.set(true);

        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(loss_shape.to_vec(), vec![T::one()]));
        for index in (0..=loss.0).rev() {
            let node = &nodes[index];
            if node.is_leaf {
                continue;
            }
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(upstream) = grads[index].take() else {
                continue;
            };
            let input_grads = backward(&upstream);
            debug_assert_eq!(input_grads.len(), node.parents.len());
            for (&parent, grad) in node.parents.iter().zip(input_grads) {
                let Some(grad) = grad else { continue };
                if !nodes[parent].requires_grad {
                    continue;
                }
                debug_assert_eq!(grad.shape(), nodes[parent].value.shape());
                match &mut grads[parent] {
                    Some(acc) => {
                        for (a, g) in acc.data_mut().iter_mut().zip(grad.data()) {
                            *a = *a + *g;
                        }
                    }
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        for (index, node) in nodes.iter().enumerate() {
            if !(node.is_leaf && node.requires_grad) {
                grads[index] = None;
            } else if grads[index].is_none() {
                grads[index] = Some(node.value.zeros_like());
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of trainable leaves, produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of a trainable leaf; `None` for any other record.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
