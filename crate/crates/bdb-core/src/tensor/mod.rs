//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tensor`] is a cheaply cloneable handle onto an immutable node of a
//! gradient tape. Building an expression records parent links and a
//! backward rule; [`Tensor::backward`] replays the tape in reverse
//! topological order and accumulates gradients additively into every
//! reachable node that requires them.
//!
//! Values are stored row-major. Broadcasting is restricted to
//! scalar-with-tensor; anything richer must be spelled out with
//! [`Tensor::reshape`] / [`Tensor::expand_axis`].

mod batchnorm;
mod ops;

pub use batchnorm::{batch_norm, BnMode, RunningStats};
pub use ops::Reduce;

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Maps the gradient w.r.t. an op's output to gradients w.r.t. each parent
/// (`None` for parents that do not require a gradient).
type BackwardRule = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward_rule: Option<BackwardRule>,
}

/// Handle onto one tape node. Clones share the node.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .field("data", &self.node.data)
            .finish()
    }
}

fn check_shape(data: &[f64], shape: &[usize]) -> Result<()> {
    let numel: usize = shape.iter().product();
    if numel != data.len() {
        return Err(Error::Dimension(format!(
            "shape {:?} implies {} elements, got {}",
            shape,
            numel,
            data.len()
        )));
    }
    Ok(())
}

impl Tensor {
    fn new_node(
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward_rule: Option<BackwardRule>,
    ) -> Tensor {
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                parents,
                backward_rule,
            }),
        }
    }

    /// Leaf tensor that participates in gradient computation.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        check_shape(&data, shape)?;
        Ok(Self::new_node(data, shape.to_vec(), true, Vec::new(), None))
    }

    /// Leaf tensor excluded from gradient computation.
    pub fn constant(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        check_shape(&data, shape)?;
        Ok(Self::new_node(data, shape.to_vec(), false, Vec::new(), None))
    }

    pub fn scalar(v: f64) -> Tensor {
        Self::new_node(vec![v], Vec::new(), false, Vec::new(), None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        let numel = shape.iter().product();
        Self::new_node(vec![v; numel], shape.to_vec(), false, Vec::new(), None)
    }

    /// Internal constructor for op outputs. Inputs that require no gradient
    /// are pruned from the tape so detached subgraphs stay detached.
    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        rule: BackwardRule,
    ) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if requires_grad {
            Self::new_node(data, shape, true, parents, Some(rule))
        } else {
            Self::new_node(data, shape, false, Vec::new(), None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.node.data
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Dimension(format!(
                "item() requires one element, shape is {:?}",
                self.shape()
            )));
        }
        Ok(self.node.data[0])
    }

    /// Accumulated gradient, if any backward pass has reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Copy of the values detached from the tape.
    pub fn detach(&self) -> Tensor {
        Self::new_node(
            self.node.data.clone(),
            self.node.shape.clone(),
            false,
            Vec::new(),
            None,
        )
    }

    /// Runs reverse accumulation from a one-element tensor. Gradients add
    /// into every reachable `requires_grad` ancestor; repeated calls keep
    /// accumulating until [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Dimension(format!(
                "backward() requires a scalar, shape is {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // Iterative post-order DFS; the post-order is a topological order
        // of the DAG, so its reverse is safe for gradient propagation.
        let mut topo: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        while let Some((t, child_idx)) = stack.pop() {
            if child_idx == 0 {
                if visited.contains(&t.node.id) {
                    continue;
                }
                visited.insert(t.node.id);
            }
            if child_idx < t.node.parents.len() {
                let parent = t.node.parents[child_idx].clone();
                stack.push((t, child_idx + 1));
                if !visited.contains(&parent.node.id) {
                    stack.push((parent, 0));
                }
            } else {
                topo.push(t);
            }
        }

        // Per-pass gradient buffers; merged into persistent grads at the
        // end so a second backward() does not re-propagate old gradients.
        let mut local: HashMap<u64, Vec<f64>> = HashMap::new();
        local.insert(self.node.id, vec![1.0]);

        for t in topo.iter().rev() {
            let Some(g) = local.get(&t.node.id).cloned() else {
                continue;
            };
            if let Some(rule) = &t.node.backward_rule {
                let parent_grads = rule(&g);
                debug_assert_eq!(parent_grads.len(), t.node.parents.len());
                for (parent, pg) in t.node.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    debug_assert_eq!(pg.len(), parent.numel());
                    let entry = local
                        .entry(parent.node.id)
                        .or_insert_with(|| vec![0.0; parent.numel()]);
                    for (e, v) in entry.iter_mut().zip(&pg) {
                        *e += v;
                    }
                }
            }
        }

        for t in &topo {
            if !t.node.requires_grad {
                continue;
            }
            let add = local
                .get(&t.node.id)
                .cloned()
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            let mut slot = t.node.grad.borrow_mut();
            match slot.as_mut() {
                Some(existing) => {
                    for (e, v) in existing.iter_mut().zip(&add) {
                        *e += v;
                    }
                }
                None => *slot = Some(add),
            }
        }
        Ok(())
    }
}

/// Flat index helpers shared by the shape-manipulating ops.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

pub(crate) fn unravel(mut flat: usize, strides: &[usize], out: &mut [usize]) {
    for (o, s) in out.iter_mut().zip(strides) {
        *o = flat / s;
        flat %= s;
    }
}
