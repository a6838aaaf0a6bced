//! Dense f64 tensors with a dynamic reverse-mode autograd graph.
//!
//! A [`Tensor`] is a cheap reference-counted handle. Operations whose inputs
//! all have `requires_grad == false` produce plain tensors and record nothing,
//! so frozen forward passes carry no graph overhead. The graph is rebuilt on
//! every forward pass and freed when the last handle to its root is dropped.

mod conv;
mod io;
mod ops;
mod optim;
mod rng;

pub use conv::conv2d;
pub use io::{read_tensor, tensor_from_bytes, tensor_to_bytes, write_tensor};
pub use optim::{AdamConfig, AdamState};
pub use rng::RngState;

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct GradFn {
    name: &'static str,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    grad_fn: Option<GradFn>,
}

#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.inner.data.borrow();
        let preview: Vec<f64> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("op", &self.inner.grad_fn.as_ref().map(|g| g.name))
            .field("data", &preview)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, grad_fn: Option<GradFn>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                grad_fn,
            }),
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!("shape {shape:?} has a zero dimension")));
        }
        if numel(shape) != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), vec![0.0; numel(shape)], false, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::build(shape.to_vec(), vec![value; numel(shape)], false, None)
    }

    pub fn scalar(value: f64) -> Self {
        Self::build(vec![1], vec![value], false, None)
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut RngState) -> Self {
        let data = (0..numel(shape)).map(|_| rng.normal() * std).collect();
        Self::build(shape.to_vec(), data, false, None)
    }

    /// A leaf that accumulates gradients.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Ok(Self::from_vec(shape, data)?.into_param())
    }

    /// Returns a new leaf with the same values and `requires_grad = true`.
    pub fn into_param(self) -> Self {
        Self::build(self.inner.shape.clone(), self.to_vec(), true, None)
    }

    /// Copies the values into a fresh leaf that is cut off from the graph.
    pub fn detach(&self) -> Self {
        Self::build(self.inner.shape.clone(), self.to_vec(), false, None)
    }

    /// Builds the result of an operation, recording `backward` only when at
    /// least one parent takes part in differentiation.
    pub(crate) fn from_op<F>(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: F,
    ) -> Self
    where
        F: Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + 'static,
    {
        if parents.iter().any(Tensor::requires_grad) {
            let grad_fn = GradFn {
                name,
                parents,
                backward: Box::new(backward),
            };
            Self::build(shape, data, true, Some(grad_fn))
        } else {
            Self::build(shape, data, false, None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.inner.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.grad_fn.is_none()
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.inner.grad_fn.as_ref().map(|g| g.name)
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    pub fn item(&self) -> f64 {
        self.inner.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Overwrites the values of a leaf in place. Used by optimizers and
    /// checkpoint loading; never called on graph interior nodes.
    pub fn assign(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::dim(format!(
                "cannot assign {} values to tensor of shape {:?}",
                values.len(),
                self.shape()
            )));
        }
        self.inner.data.borrow_mut().copy_from_slice(values);
        Ok(())
    }

    pub(crate) fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.inner.data.borrow_mut());
    }

    pub fn same_tensor(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn is_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }

    /// Reverse-mode sweep from a scalar. Leaves accumulate into their
    /// gradient buffer; interior nodes have theirs overwritten.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let order = self.topo_order();
        let mut pending: HashMap<*const Inner, Vec<f64>> = HashMap::new();
        pending.insert(Rc::as_ptr(&self.inner), vec![1.0]);

        for node in order.iter().rev() {
            let key = Rc::as_ptr(&node.inner);
            let Some(g) = pending.remove(&key) else {
                continue;
            };
            match &node.inner.grad_fn {
                Some(gf) => {
                    let needs: Vec<bool> = gf.parents.iter().map(Tensor::requires_grad).collect();
                    let parent_grads = (gf.backward)(&g, &needs);
                    for ((parent, pg), need) in gf.parents.iter().zip(parent_grads).zip(needs) {
                        let Some(pg) = pg else { continue };
                        if !need {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), parent.numel(), "grad size from {}", gf.name);
                        match pending.entry(Rc::as_ptr(&parent.inner)) {
                            std::collections::hash_map::Entry::Occupied(mut e) => {
                                for (a, b) in e.get_mut().iter_mut().zip(&pg) {
                                    *a += b;
                                }
                            }
                            std::collections::hash_map::Entry::Vacant(e) => {
                                e.insert(pg);
                            }
                        }
                    }
                    *node.inner.grad.borrow_mut() = Some(g);
                }
                None => {
                    let mut slot = node.inner.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(&g) {
                                *a += b;
                            }
                        }
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: std::collections::HashSet<*const Inner> = Default::default();
        // (node, children already pushed)
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            let key = Rc::as_ptr(&node.inner);
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(key) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(gf) = &node.inner.grad_fn {
                for p in &gf.parents {
                    if p.requires_grad() && !visited.contains(&Rc::as_ptr(&p.inner)) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(&[0, 3], vec![]).is_err());
        let t = Tensor::from_vec(&[2, 3], vec![1.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
        assert!(!t.requires_grad());
    }

    #[test]
    fn frozen_inputs_record_no_graph() {
        let a = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let b = a.mul(&a).unwrap();
        assert!(b.is_leaf());
        assert!(!b.requires_grad());
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f = sum(x*x + x) -> df/dx = 2x + 1
        let x = Tensor::param(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let y = x.mul(&x).unwrap().add(&x).unwrap().sum();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0, -3.0, 2.0]);
    }

    #[test]
    fn backward_twice_after_zeroing_is_identical() {
        let x = Tensor::param(&[4], vec![0.3, -0.1, 0.7, 1.2]).unwrap();
        let loss = x.exp().mul(&x).unwrap().mean();
        loss.backward().unwrap();
        let first = x.grad().unwrap();
        x.zero_grad();
        loss.backward().unwrap();
        assert_eq!(first, x.grad().unwrap());
    }

    #[test]
    fn every_reachable_grad_tensor_gets_grad() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let h = x.relu();
        let loss = h.sum();
        loss.backward().unwrap();
        assert!(h.grad().is_some());
        assert!(x.grad().is_some());
        assert!(loss.grad().is_some());
    }

    #[test]
    fn backward_needs_scalar() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(x.relu().backward(), Err(Error::Dimension(_))));
    }
}
