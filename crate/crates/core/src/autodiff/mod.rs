//! Reverse-mode gradient tape.
//!
//! Every forward operation appends one node to the tape. [`Tape::backward`]
//! walks the nodes in exact reverse order of creation, so gradient
//! accumulation into a tensor with several consumers always happens in the
//! same order and two backward passes over one tape are bit-identical.
//!
//! Parameters are registered as borrowed leaves ([`Tape::param`]), which avoids
//! copying large voxel grids into the tape on every step.

mod conv;
mod elementwise;
mod linalg;
mod shape;
mod volume;

use std::ops::Deref;

pub use elementwise::Unary;
pub use volume::{composite_alphas, CompositeResult};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Data<'a, T> {
    Owned(Vec<T>),
    Borrowed(&'a [T]),
}

impl<T> Deref for Data<'_, T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        match self {
            Data::Owned(v) => v,
            Data::Borrowed(s) => s,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

pub(crate) enum Op<T> {
    Leaf,
    Binary { kind: BinaryKind, a: Var, b: Var },
    AddScalar(Var),
    MulScalar(Var, T),
    Unary(Unary<T>, Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Transpose(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    ScatterRows { x: Var, rows: Vec<usize> },
    Matmul(Var, Var),
    Conv2d { input: Var, kernel: Var, bias: Option<Var>, stride: usize, cols: Vec<T> },
    Upsample2x(Var),
    AvgPool2x(Var),
    Trilinear { grid: Var, taps: Vec<volume::Tap<T>> },
    Composite { sigma: Var, values: Var, deltas: Vec<T> },
}

struct Node<'a, T> {
    data: Data<'a, T>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op<T>,
}

/// Ordered record of executed operations.
pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    strict: bool,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), strict: false }
    }

    /// A tape that rejects any operation producing a NaN or infinity.
    pub fn strict() -> Self {
        Self { nodes: Vec::new(), strict: true }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf borrowing the parameter's storage.
    pub fn param(&mut self, t: &'a Tensor<T>) -> Var {
        self.push_leaf(Data::Borrowed(t.data()), t.shape().to_vec(), true)
    }

    /// Non-trainable leaf borrowing external storage.
    pub fn constant_ref(&mut self, t: &'a Tensor<T>) -> Var {
        self.push_leaf(Data::Borrowed(t.data()), t.shape().to_vec(), false)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push_leaf(Data::Owned(t.into_data()), shape, false)
    }

    /// Owned leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push_leaf(Data::Owned(t.into_data()), shape, true)
    }

    /// Copy of `x` that is cut off from the gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let data = self.value(x).to_vec();
        let shape = self.shape(x).to_vec();
        self.push_leaf(Data::Owned(data), shape, false)
    }

    pub fn value(&self, x: Var) -> &[T] {
        &self.nodes[x.0].data
    }

    pub fn shape(&self, x: Var) -> &[usize] {
        &self.nodes[x.0].shape
    }

    pub fn requires_grad(&self, x: Var) -> bool {
        self.nodes[x.0].requires_grad
    }

    pub fn tensor(&self, x: Var) -> Tensor<T> {
        Tensor::new(self.shape(x).to_vec(), self.value(x).to_vec())
            .expect("node shape matches its data")
    }

    /// Value of a single-element node.
    pub fn item(&self, x: Var) -> T {
        self.value(x)[0]
    }

    fn push_leaf(&mut self, data: Data<'a, T>, shape: Vec<usize>, requires_grad: bool) -> Var {
        self.nodes.push(Node { data, shape, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(
        &mut self,
        name: &'static str,
        data: Vec<T>,
        shape: Vec<usize>,
        inputs: &[Var],
        op: Op<T>,
    ) -> Result<Var> {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        if self.strict && !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Constant subgraphs need no backward record.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { data: Data::Owned(data), shape, requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse-mode sweep from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Grads<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must hold one element, has shape {:?}", self.shape(root)),
            ));
        }
        let mut store = GradStore {
            bufs: (0..=root.0).map(|_| None).collect(),
            meta: self.nodes[..=root.0]
                .iter()
                .map(|n| (n.requires_grad, n.data.len()))
                .collect(),
        };
        if !self.nodes[root.0].requires_grad {
            return Ok(Grads { bufs: store.bufs });
        }
        store.bufs[root.0] = Some(vec![T::one()]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = store.bufs[idx].take() else { continue };
            self.backward_node(idx, &gout, &mut store);
        }
        Ok(Grads { bufs: store.bufs })
    }

    fn backward_node(&self, idx: usize, gout: &[T], store: &mut GradStore<T>) {
        let out = Var(idx);
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => self.binary_backward(*kind, *a, *b, gout, store),
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(g) = store.slot(*x) {
                    add_into(g, gout);
                }
            }
            Op::MulScalar(x, c) => {
                if let Some(g) = store.slot(*x) {
                    for (gi, go) in g.iter_mut().zip(gout) {
                        *gi += *go * *c;
                    }
                }
            }
            Op::Unary(kind, x) => self.unary_backward(*kind, *x, out, gout, store),
            Op::Sum(x) => {
                if let Some(g) = store.slot(*x) {
                    g.iter_mut().for_each(|v| *v += gout[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(g) = store.slot(*x) {
                    let s = gout[0] / T::c(g.len() as f64);
                    g.iter_mut().for_each(|v| *v += s);
                }
            }
            Op::Transpose(x) => self.transpose_backward(*x, gout, store),
            Op::Concat { inputs, axis } => self.concat_backward(inputs, *axis, out, gout, store),
            Op::Narrow { x, axis, start } => self.narrow_backward(*x, *axis, *start, out, gout, store),
            Op::ScatterRows { x, rows } => self.scatter_rows_backward(*x, rows, gout, store),
            Op::Matmul(a, b) => self.matmul_backward(*a, *b, gout, store),
            Op::Conv2d { input, kernel, bias, stride, cols } => {
                self.conv2d_backward(*input, *kernel, *bias, *stride, cols, out, gout, store)
            }
            Op::Upsample2x(x) => self.upsample_backward(*x, gout, store),
            Op::AvgPool2x(x) => self.avg_pool_backward(*x, gout, store),
            Op::Trilinear { grid, taps } => self.trilinear_backward(*grid, taps, gout, store),
            Op::Composite { sigma, values, deltas } => {
                self.composite_backward(*sigma, *values, deltas, gout, store)
            }
        }
    }
}

pub(crate) struct GradStore<T> {
    bufs: Vec<Option<Vec<T>>>,
    meta: Vec<(bool, usize)>,
}

impl<T: Scalar> GradStore<T> {
    /// Gradient buffer for `v`, allocated on first use; `None` when `v` is
    /// not on a gradient path.
    pub(crate) fn slot(&mut self, v: Var) -> Option<&mut [T]> {
        let (needs, len) = self.meta[v.0];
        if !needs {
            return None;
        }
        Some(self.bufs[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Grads<T> {
    bufs: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.bufs.get(v.0).and_then(|b| b.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.bufs.get_mut(v.0).and_then(Option::take)
    }
}
