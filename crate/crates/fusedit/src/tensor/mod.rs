//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Storage is row-major and contiguous; slices copy. Gradients accumulate
//! additively into `grad` and are reset by the caller between steps. Ops
//! record backward rules on a thread-local graph only while one is active,
//! so inference paths pay no tape overhead.

use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;

use crate::error::{FuseError, Result};

pub mod fd;
pub mod ops;

struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Shared handle to a tensor. Clones are shallow.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(FuseError::shape(
                "from_vec",
                format!("shape {:?} needs {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape: shape.to_vec(),
                data,
                requires_grad: false,
                grad: None,
            })),
        })
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(vec![v], &[]).unwrap()
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(vec![0.0; numel], shape).unwrap()
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(vec![v; numel], shape).unwrap()
    }

    /// A trainable leaf.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(data, shape)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |i| i.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    pub fn item(&self) -> f64 {
        let inner = self.inner.borrow();
        debug_assert_eq!(inner.data.len(), 1);
        inner.data[0]
    }

    /// Overwrite the stored values in place (optimizer updates, checkpoint
    /// restore). Panics on length mismatch.
    pub fn set_data(&self, data: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.data.len(), data.len(), "set_data length mismatch");
        inner.data.copy_from_slice(data);
    }

    pub fn data_mut(&self) -> RefMut<'_, [f64]> {
        RefMut::map(self.inner.borrow_mut(), |i| i.data.as_mut_slice())
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, v: bool) {
        let mut inner = self.inner.borrow_mut();
        inner.requires_grad = v;
        if !v {
            inner.grad = None;
        }
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Add `delta` into the gradient buffer, allocating it on first use.
    /// No-op for tensors that do not require grad.
    pub fn accum_grad(&self, delta: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        if !inner.requires_grad {
            return;
        }
        let n = inner.data.len();
        assert_eq!(n, delta.len(), "accum_grad length mismatch");
        let grad = inner.grad.get_or_insert_with(|| vec![0.0; n]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    fn grad_or_none(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

// ---------------------------------------------------------------------------
// Recording graph (tape)
// ---------------------------------------------------------------------------

struct Node {
    out: Tensor,
    back: Box<dyn Fn(&[f64])>,
}

thread_local! {
    static GRAPH: RefCell<Option<Vec<Node>>> = const { RefCell::new(None) };
}

/// RAII guard for an active recording graph. Dropping it discards any
/// remaining nodes and stops recording.
pub struct GraphGuard {
    _private: (),
}

impl Drop for GraphGuard {
    fn drop(&mut self) {
        GRAPH.with(|g| *g.borrow_mut() = None);
    }
}

/// Begin recording. Ops executed while the guard lives are added to the
/// graph in execution (topological) order.
pub fn start_graph() -> GraphGuard {
    GRAPH.with(|g| *g.borrow_mut() = Some(Vec::new()));
    GraphGuard { _private: () }
}

pub fn is_recording() -> bool {
    GRAPH.with(|g| g.borrow().is_some())
}

/// Record a node. `back` receives the output gradient and is responsible
/// for accumulating into the inputs it captured.
pub(crate) fn record(out: &Tensor, back: impl Fn(&[f64]) + 'static) {
    GRAPH.with(|g| {
        if let Some(nodes) = g.borrow_mut().as_mut() {
            out.set_requires_grad(true);
            nodes.push(Node {
                out: out.clone(),
                back: Box::new(back),
            });
        }
    });
}

/// Reverse pass from a scalar root. Visits nodes in exact reverse recording
/// order; every grad-requiring leaf reachable from the root ends up holding
/// d(root)/d(leaf). The recorded nodes are consumed; the graph stays active.
pub fn backward(root: &Tensor) -> Result<()> {
    if root.numel() != 1 {
        return Err(FuseError::NonScalarRoot(root.shape()));
    }
    let nodes = GRAPH.with(|g| match g.borrow_mut().as_mut() {
        Some(nodes) => Ok(std::mem::take(nodes)),
        None => Err(FuseError::NoActiveGraph),
    })?;
    if !root.requires_grad() {
        // Root has no grad path; nothing to do, but the contract demands the
        // root was produced under the graph.
        return Err(FuseError::NoActiveGraph);
    }
    root.accum_grad(&[1.0]);
    for node in nodes.iter().rev() {
        if let Some(g) = node.out.grad_or_none() {
            (node.back)(&g);
        }
    }
    Ok(())
}

pub(crate) fn should_record(inputs: &[&Tensor]) -> bool {
    is_recording() && inputs.iter().any(|t| t.requires_grad())
}

#[cfg(test)]
mod tests {
    use super::ops;
    use super::*;

    #[test]
    fn grad_of_sum_of_squares() {
        let x = Tensor::param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let _g = start_graph();
        let sq = ops::mul(&x, &x).unwrap();
        let loss = ops::sum_all(&sq).unwrap();
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn product_rule() {
        let a = Tensor::param(vec![2.0], &[1]).unwrap();
        let b = Tensor::param(vec![5.0], &[1]).unwrap();
        let _g = start_graph();
        let p = ops::mul(&a, &b).unwrap();
        let loss = ops::sum_all(&p).unwrap();
        backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![5.0]);
        assert_eq!(b.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn backward_on_non_scalar_errors() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let _g = start_graph();
        let y = ops::add(&x, &x).unwrap();
        assert!(matches!(backward(&y), Err(FuseError::NonScalarRoot(_))));
    }

    #[test]
    fn no_recording_without_graph() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = ops::add(&x, &x).unwrap();
        // Not recorded: output does not require grad.
        assert!(!y.requires_grad());
    }

    #[test]
    fn fanout_accumulates_like_unshared_graph() {
        // shared: y = x*x + x*x ; unshared: y = a*a + b*b with a=b=x
        let x = Tensor::param(vec![3.0], &[1]).unwrap();
        {
            let _g = start_graph();
            let s = ops::mul(&x, &x).unwrap();
            let y = ops::add(&s, &s).unwrap();
            let loss = ops::sum_all(&y).unwrap();
            backward(&loss).unwrap();
        }
        let shared = x.grad().unwrap();

        let a = Tensor::param(vec![3.0], &[1]).unwrap();
        let b = Tensor::param(vec![3.0], &[1]).unwrap();
        {
            let _g = start_graph();
            let sa = ops::mul(&a, &a).unwrap();
            let sb = ops::mul(&b, &b).unwrap();
            let y = ops::add(&sa, &sb).unwrap();
            let loss = ops::sum_all(&y).unwrap();
            backward(&loss).unwrap();
        }
        let unshared = a.grad().unwrap()[0] + b.grad().unwrap()[0];
        assert_eq!(shared[0], unshared);
    }
}
