//! Dense n-dimensional tensors with reverse-mode automatic differentiation.
//!
//! The engine is tape-based: every primitive records a node holding its
//! output value, its parent node ids, and a backward rule. Calling
//! [`Tensor::backward`] on a scalar walks the tape in reverse and accumulates
//! gradients into every leaf that requires them.
//!
//! Values are reference-counted so recording is cheap; gradients of interior
//! nodes are dropped as soon as they have been propagated, keeping peak
//! memory close to the forward activations.
//!
//! All ops are generic over [`Elem`], implemented for `f32` (training) and
//! `f64` (gradient checks against central finite differences).
//!
//! ```
//! use csnet::tensor::{Tape, ops};
//! use ndarray::array;
//!
//! let tape = Tape::<f64>::new();
//! let a = tape.leaf(array![1.0, 2.0, 3.0].into_dyn(), true);
//! let b = tape.leaf(array![4.0, 5.0, 6.0].into_dyn(), false);
//! let loss = ops::sum(&ops::mul(&a, &b).unwrap());
//! loss.backward().unwrap();
//! assert_eq!(a.grad().unwrap(), array![4.0, 5.0, 6.0].into_dyn());
//! ```

pub mod adam;
pub mod checkpoint;
pub mod conv;
pub mod ops;

use std::cell::RefCell;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, Neg};
use std::rc::Rc;

use ndarray::{ArrayD, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use conv::{batchnorm2d, conv2d, conv_bn, BnMode};

/// Ordered, named parameter collection. BTreeMap keeps iteration (and thus
/// optimizer updates and checkpoint bytes) deterministic.
pub type Params<E> = std::collections::BTreeMap<String, ArrayD<E>>;

/// Scalar element type the engine runs on.
pub trait Elem:
    LinalgScalar
    + Float
    + FromPrimitive
    + ScalarOperand
    + AddAssign
    + Neg<Output = Self>
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: u8;
    const DTYPE_NAME: &'static str;
    fn append_le(values: &[Self], out: &mut Vec<u8>);
    fn parse_le(bytes: &[u8]) -> Option<Vec<Self>>;
    fn from_f64_(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 conversion")
    }
    fn from_usize_(v: usize) -> Self {
        <Self as FromPrimitive>::from_usize(v).expect("usize conversion")
    }
}

impl Elem for f32 {
    const DTYPE: u8 = 1;
    const DTYPE_NAME: &'static str = "f32";
    fn append_le(values: &[Self], out: &mut Vec<u8>) {
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn parse_le(bytes: &[u8]) -> Option<Vec<Self>> {
        if bytes.len() % 4 != 0 {
            return None;
        }
        Some(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        )
    }
}

impl Elem for f64 {
    const DTYPE: u8 = 2;
    const DTYPE_NAME: &'static str = "f64";
    fn append_le(values: &[Self], out: &mut Vec<u8>) {
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn parse_le(bytes: &[u8]) -> Option<Vec<Self>> {
        if bytes.len() % 8 != 0 {
            return None;
        }
        Some(
            bytes
                .chunks_exact(8)
                .map(|c| {
                    let mut b = [0u8; 8];
                    b.copy_from_slice(c);
                    f64::from_le_bytes(b)
                })
                .collect(),
        )
    }
}

/// Backward rule of a recorded primitive.
///
/// `out` is the node's own forward value, `grad` the gradient flowing into
/// it, `inputs` the parent values. Implementations return one gradient per
/// parent, skipping (`None`) parents whose `needs` flag is false.
pub trait BackwardOp<E: Elem> {
    fn backward(
        &self,
        out: &ArrayD<E>,
        grad: &ArrayD<E>,
        inputs: &[Rc<ArrayD<E>>],
        needs: &[bool],
    ) -> Vec<Option<ArrayD<E>>>;
}

struct Node<E: Elem> {
    value: Rc<ArrayD<E>>,
    requires_grad: bool,
    parents: Vec<usize>,
    op: Option<Box<dyn BackwardOp<E>>>,
    grad: Option<ArrayD<E>>,
}

struct TapeInner<E: Elem> {
    nodes: Vec<Node<E>>,
}

/// Gradient tape. Cloning is shallow; all clones record onto the same tape.
pub struct Tape<E: Elem> {
    inner: Rc<RefCell<TapeInner<E>>>,
}

impl<E: Elem> Clone for Tape<E> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Elem> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Tape<E> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new() })),
        }
    }

    /// Record an input tensor (parameter or data).
    pub fn leaf(&self, value: ArrayD<E>, requires_grad: bool) -> Tensor<E> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            parents: Vec::new(),
            op: None,
            grad: None,
        });
        Tensor {
            id,
            tape: self.clone(),
        }
    }

    pub(crate) fn push(
        &self,
        value: ArrayD<E>,
        parents: Vec<usize>,
        op: Box<dyn BackwardOp<E>>,
    ) -> Tensor<E> {
        let mut inner = self.inner.borrow_mut();
        let requires_grad = parents.iter().any(|&p| inner.nodes[p].requires_grad);
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            parents: if requires_grad { parents } else { Vec::new() },
            op: if requires_grad { Some(op) } else { None },
            grad: None,
        });
        Tensor {
            id,
            tape: self.clone(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    fn same_tape(&self, other: &Tape<E>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

/// Handle to a node on a [`Tape`].
pub struct Tensor<E: Elem> {
    id: usize,
    tape: Tape<E>,
}

impl<E: Elem> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            id: self.id,
            tape: self.tape.clone(),
        }
    }
}

impl<E: Elem> Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<E: Elem> Tensor<E> {
    pub(crate) fn id(&self) -> usize {
        self.id
    }

    pub(crate) fn tape(&self) -> &Tape<E> {
        &self.tape
    }

    /// Forward value (cheap; shares storage with the tape).
    pub fn value(&self) -> Rc<ArrayD<E>> {
        Rc::clone(&self.tape.inner.borrow().nodes[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id]
            .value
            .shape()
            .to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    /// Accumulated gradient. Only leaves retain gradients after `backward`.
    pub fn grad(&self) -> Option<ArrayD<E>> {
        self.tape.inner.borrow().nodes[self.id].grad.clone()
    }

    pub fn zero_grad(&self) {
        self.tape.inner.borrow_mut().nodes[self.id].grad = None;
    }

    /// Reverse pass from a scalar. Repeated calls accumulate into leaf
    /// gradients; interior gradients are consumed during the walk.
    pub fn backward(&self) -> Result<()> {
        let mut inner = self.tape.inner.borrow_mut();
        let numel = inner.nodes[self.id].value.len();
        if numel != 1 {
            return Err(Error::NonScalarLoss(numel));
        }
        if !inner.nodes[self.id].requires_grad {
            return Ok(());
        }
        let seed_shape = inner.nodes[self.id].value.raw_dim();
        let seed = ArrayD::ones(seed_shape);
        match &mut inner.nodes[self.id].grad {
            Some(g) => *g += &seed,
            slot @ None => *slot = Some(seed),
        }

        for i in (0..=self.id).rev() {
            let (op, parents, out, grad) = {
                let node = &mut inner.nodes[i];
                if node.grad.is_none() {
                    continue;
                }
                let op = match node.op.take() {
                    Some(op) => op,
                    None => continue, // leaf keeps its gradient
                };
                let grad = node.grad.take().expect("grad checked above");
                (op, node.parents.clone(), Rc::clone(&node.value), grad)
            };
            let inputs: Vec<Rc<ArrayD<E>>> = parents
                .iter()
                .map(|&p| Rc::clone(&inner.nodes[p].value))
                .collect();
            let needs: Vec<bool> = parents
                .iter()
                .map(|&p| inner.nodes[p].requires_grad)
                .collect();
            let parent_grads = op.backward(&out, &grad, &inputs, &needs);
            debug_assert_eq!(parent_grads.len(), parents.len());
            for (&p, pg) in parents.iter().zip(parent_grads) {
                if let Some(pg) = pg {
                    debug_assert_eq!(pg.shape(), inner.nodes[p].value.shape());
                    match &mut inner.nodes[p].grad {
                        Some(g) => *g += &pg,
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            inner.nodes[i].op = Some(op);
        }
        Ok(())
    }
}

pub(crate) fn check_same_tape<E: Elem>(a: &Tensor<E>, b: &Tensor<E>) {
    assert!(
        a.tape.same_tape(&b.tape),
        "tensors must live on the same tape"
    );
}
