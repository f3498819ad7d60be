//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap-to-clone handle (`Rc`) onto a flat row-major
//! `Vec<f32>` buffer plus optional gradient and recorded provenance. Ops
//! build a DAG of nodes while gradients are enabled and at least one input
//! is tracked; [`Tensor::backward`] walks the DAG in reverse topological
//! order and accumulates gradients additively across fan-out.
//!
//! The engine is single-threaded by design: one model instance is driven by
//! one thread, which is all the training loop needs.

pub mod flops;
mod ops;
pub mod rng;

pub use ops::{concat, NormMode};

use crate::error::{Error, Result};
use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Disable gradient recording for the duration of `f` (inference paths).
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Backward function: given d(loss)/d(output) and the output's data, return
/// the gradient contribution for each parent (None when a parent gets none,
/// e.g. fixed convolution kernels).
pub(crate) type BackwardFn = Box<dyn Fn(&[f32], &[f32]) -> Vec<Option<Vec<f32>>>>;

pub(crate) struct Node {
    pub parents: Vec<Tensor>,
    pub backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    node: Option<Node>,
}

/// N-dimensional f32 array with optional gradient slot and recorded
/// provenance. `Clone` is O(1) (shared handle).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={}, tracked={})",
            inner.shape,
            inner.requires_grad,
            inner.node.is_some()
        )
    }
}

impl Tensor {
    fn new_inner(data: Vec<f32>, shape: Vec<usize>, requires_grad: bool, node: Option<Node>) -> Tensor {
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                id: fresh_id(),
                shape,
                data,
                grad: None,
                requires_grad,
                node,
            })),
        }
    }

    pub fn from_vec(data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor::new_inner(data, shape.to_vec(), false, None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::new_inner(vec![0.0; numel], shape.to_vec(), false, None)
    }

    pub fn full(shape: &[usize], value: f32) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::new_inner(vec![value; numel], shape.to_vec(), false, None)
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor::new_inner(vec![value], vec![1], false, None)
    }

    /// Tensor with entries drawn from U[lo, hi).
    pub fn rand_uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut rng::SplitMix64) -> Tensor {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.uniform(lo, hi)).collect();
        Tensor::new_inner(data, shape.to_vec(), false, None)
    }

    /// Tensor with entries drawn from N(0, std^2).
    pub fn rand_normal(shape: &[usize], std: f32, rng: &mut rng::SplitMix64) -> Tensor {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.normal() * std).collect();
        Tensor::new_inner(data, shape.to_vec(), false, None)
    }

    /// Record the output of an op. A node is attached only while gradients
    /// are enabled and some parent is tracked; otherwise the result is a
    /// plain constant and the graph is pruned at this point.
    pub(crate) fn from_op(
        data: Vec<f32>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced by a forward op (shape {:?})",
            shape
        );
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let track = grad_enabled() && parents.iter().any(|p| p.is_tracked());
        let node = if track { Some(Node { parents, backward }) } else { None };
        Tensor::new_inner(data, shape, false, node)
    }

    pub fn id(&self) -> u64 {
        self.inner.borrow().id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    /// Borrow the underlying buffer (read-only).
    pub fn data(&self) -> Ref<'_, [f32]> {
        Ref::map(self.inner.borrow(), |i| i.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.borrow().data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        let inner = self.inner.borrow();
        debug_assert_eq!(inner.data.len(), 1, "item() on non-scalar tensor");
        inner.data[0]
    }

    /// Overwrite the buffer in place (parameter updates, tests).
    pub fn copy_from(&self, src: &[f32]) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.data.len(), src.len(), "copy_from length mismatch");
        inner.data.copy_from_slice(src);
    }

    pub fn fill(&self, value: f32) {
        self.inner.borrow_mut().data.iter_mut().for_each(|v| *v = value);
    }

    pub fn set(&self, index: usize, value: f32) {
        self.inner.borrow_mut().data[index] = value;
    }

    /// Apply an in-place update to the buffer (used by the optimizer).
    pub fn update_data(&self, f: impl FnOnce(&mut [f32])) {
        f(&mut self.inner.borrow_mut().data);
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// Mark a leaf tensor as trainable. Errors on non-leaf tensors: gradient
    /// roots must be graph leaves.
    pub fn set_requires_grad(&self, yes: bool) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if inner.node.is_some() {
            return Err(Error::Contract(
                "requires_grad can only be toggled on leaf tensors".into(),
            ));
        }
        inner.requires_grad = yes;
        Ok(())
    }

    /// True when gradients should flow into or through this tensor.
    pub fn is_tracked(&self) -> bool {
        let inner = self.inner.borrow();
        inner.requires_grad || inner.node.is_some()
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Scale the stored gradient in place (gradient clipping).
    pub fn scale_grad(&self, factor: f32) {
        if let Some(g) = self.inner.borrow_mut().grad.as_mut() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    fn accumulate_grad(&self, g: Vec<f32>) {
        let mut inner = self.inner.borrow_mut();
        debug_assert_eq!(g.len(), inner.data.len(), "gradient shape mismatch");
        match &mut inner.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => inner.grad = Some(g),
        }
    }

    /// Reverse-mode sweep from a scalar loss. Populates `grad` on every
    /// tracked tensor reachable through recorded ops; gradients accumulate
    /// additively across fan-out and across repeated `backward` calls.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }

        // Post-order DFS over parent edges: every tensor is appended after
        // all of its parents, so the reversed order processes consumers
        // before producers.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((t, idx)) = stack.pop() {
            let parent = {
                let inner = t.inner.borrow();
                inner.node.as_ref().and_then(|n| n.parents.get(idx).cloned())
            };
            match parent {
                Some(p) => {
                    stack.push((t, idx + 1));
                    if visited.insert(p.id()) {
                        stack.push((p, 0));
                    }
                }
                None => order.push(t),
            }
        }

        self.accumulate_grad(vec![1.0]);

        for t in order.iter().rev() {
            let contributions = {
                let inner = t.inner.borrow();
                match (&inner.node, &inner.grad) {
                    (Some(node), Some(gout)) => {
                        let grads = (node.backward)(gout, &inner.data);
                        debug_assert_eq!(grads.len(), node.parents.len());
                        Some(
                            node.parents
                                .iter()
                                .cloned()
                                .zip(grads)
                                .collect::<Vec<_>>(),
                        )
                    }
                    _ => None,
                }
            };
            if let Some(contributions) = contributions {
                for (p, g) in contributions {
                    if let Some(g) = g {
                        if p.is_tracked() {
                            p.accumulate_grad(g);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Max relative error between analytic gradients of `f` at `x` and central
/// finite differences with step `h`, over every coordinate of `x`.
///
/// `f` must be deterministic (checked by double evaluation) and scalar-valued.
/// The error metric is |analytic - fd| / max(1, |analytic|).
pub fn grad_check<F>(f: F, x: &Tensor, h: f32) -> Result<f32>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    grad_check_sampled(f, x, h, usize::MAX, 0)
}

/// Like [`grad_check`] but probing at most `max_coords` coordinates, chosen
/// deterministically from `seed`. Intended for large inputs where a full
/// sweep would be too slow.
pub fn grad_check_sampled<F>(f: F, x: &Tensor, h: f32, max_coords: usize, seed: u64) -> Result<f32>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let y1 = f(x)?;
    if y1.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check requires a scalar-valued function, got shape {:?}",
            y1.shape()
        )));
    }
    let y2 = no_grad(|| f(x))?;
    if y1.item().to_bits() != y2.item().to_bits() {
        return Err(Error::Contract(format!(
            "grad_check requires a deterministic function: {} != {} on repeat evaluation",
            y1.item(),
            y2.item()
        )));
    }

    x.set_requires_grad(true)?;
    x.zero_grad();
    let y = f(x)?;
    y.backward()?;
    let analytic = x
        .grad()
        .ok_or_else(|| Error::Contract("function does not depend on x".into()))?;

    let n = x.numel();
    let coords: Vec<usize> = if n <= max_coords {
        (0..n).collect()
    } else {
        let mut rng = rng::SplitMix64::new(seed);
        let mut set = std::collections::BTreeSet::new();
        while set.len() < max_coords {
            set.insert(rng.below(n));
        }
        set.into_iter().collect()
    };

    let mut max_err = 0.0f64;
    for &i in &coords {
        let orig = x.data()[i];
        let xp = orig + h;
        let xm = orig - h;
        x.set(i, xp);
        let fp = no_grad(|| f(x))?.item() as f64;
        x.set(i, xm);
        let fm = no_grad(|| f(x))?.item() as f64;
        x.set(i, orig);
        let fd = (fp - fm) / ((xp - xm) as f64);
        let a = analytic[i] as f64;
        let err = (a - fd).abs() / a.abs().max(1.0);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err as f32)
}
