//! Minimal N-dimensional array with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted buffer plus an optional
//! record of the operation that produced it. Calling [`Tensor::backward`] on
//! a scalar walks the recorded graph and accumulates gradients into every
//! leaf created with `requires_grad`. Shapes never broadcast except against
//! scalars; callers reshape explicitly.
//!
//! Everything is generic over [`Float`] so the same model code runs in single
//! precision for training and double precision for gradient checks.

mod autograd;
mod conv;
mod kernels;
mod nn;
mod ops;
mod rng;

use std::cell::Cell;
use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{bail, Result};

pub use autograd::Graph;
pub use conv::Conv2dOptions;
pub use rng::Rng;

pub trait Float:
    num_traits::Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Float for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Float for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any operations.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(prev);
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>> + Send + Sync>;

pub(crate) struct Node<T: Float> {
    pub op: &'static str,
    pub inputs: Vec<Tensor<T>>,
    pub backward: BackwardFn<T>,
}

struct Inner<T: Float> {
    id: usize,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    node: Option<Node<T>>,
}

pub struct Tensor<T: Float = f32>(Arc<Inner<T>>);

impl<T: Float> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<T: Float> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<T> = self.0.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &preview)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Float> Tensor<T> {
    fn build(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, node: Option<Node<T>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            node,
        }))
    }

    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            bail!(
                Dimension,
                "shape {:?} holds {} elements, got {}",
                shape,
                numel(shape),
                data.len()
            );
        }
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// Trainable leaf.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let t = Self::from_vec(data, shape)?;
        Ok(t.requiring_grad())
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::from_vec(data.iter().map(|&x| T::lit(x)).collect(), shape)
    }

    pub fn scalar(x: T) -> Self {
        Self::build(vec![], vec![x], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), vec![T::zero(); numel(shape)], false, None)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::build(shape.to_vec(), vec![v; numel(shape)], false, None)
    }

    pub fn random_normal(shape: &[usize], rng: &mut Rng) -> Self {
        let data = (0..numel(shape)).map(|_| T::lit(rng.normal())).collect();
        Self::build(shape.to_vec(), data, false, None)
    }

    /// Uniform samples in [lo, hi).
    pub fn random_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let data = (0..numel(shape))
            .map(|_| T::lit(lo + (hi - lo) * rng.uniform()))
            .collect();
        Self::build(shape.to_vec(), data, false, None)
    }

    /// Same values as a fresh trainable leaf.
    pub fn requiring_grad(self) -> Self {
        match Arc::try_unwrap(self.0) {
            Ok(inner) => Self::build(inner.shape, inner.data, true, None),
            Err(shared) => Self::build(shared.shape.clone(), shared.data.clone(), true, None),
        }
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::build(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    /// Result of an operation. The node is kept only when gradients are being
    /// recorded and at least one input needs them.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        op: &'static str,
        inputs: Vec<Tensor<T>>,
        backward: impl Fn(&[T]) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
    ) -> Self {
        if grad_enabled() && inputs.iter().any(|t| t.requires_grad()) {
            let node = Node {
                op,
                inputs,
                backward: Box::new(backward),
            };
            Self::build(shape, data, true, Some(node))
        } else {
            Self::build(shape, data, false, None)
        }
    }

    /// Whether an op producing this tensor should record a backward closure.
    pub(crate) fn tracks(inputs: &[&Tensor<T>]) -> bool {
        grad_enabled() && inputs.iter().any(|t| t.requires_grad())
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn dim(&self, i: usize) -> usize {
        self.0.shape[i]
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.iter().map(|x| x.as_f64()).collect()
    }

    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            bail!(Contract, "item() on tensor of shape {:?}", self.shape());
        }
        Ok(self.0.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    pub(crate) fn id(&self) -> usize {
        self.0.id
    }

    pub(crate) fn node(&self) -> Option<&Node<T>> {
        self.0.node.as_ref()
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.0.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(acc) => {
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// In-place mutation of a leaf's values, used by optimizers. Copies the
    /// buffer only if another handle still shares it.
    pub fn update_data(&mut self, f: impl FnOnce(&mut [T])) {
        if Arc::get_mut(&mut self.0).is_none() {
            let fresh = Self::build(
                self.0.shape.clone(),
                self.0.data.clone(),
                self.0.requires_grad,
                None,
            );
            *fresh.0.grad.lock().expect("grad lock") = self.grad();
            *self = fresh;
        }
        let inner = Arc::get_mut(&mut self.0).expect("unique after copy");
        f(&mut inner.data);
    }

    pub fn is_finite(&self) -> bool {
        self.0.data.iter().all(|x| x.is_finite())
    }

    /// Converts precision, producing a fresh leaf.
    pub fn cast<U: Float>(&self) -> Tensor<U> {
        let data = self.0.data.iter().map(|x| U::lit(x.as_f64())).collect();
        let t = Tensor::<U>::build(self.0.shape.clone(), data, false, None);
        if self.requires_grad() && self.is_leaf() {
            t.requiring_grad()
        } else {
            t
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(vec![1.0, 2.0], &[3]).is_err());
        assert!(Tensor::<f32>::from_vec(vec![1.0, 2.0], &[2, 1]).is_ok());
    }

    #[test]
    fn no_grad_skips_recording() {
        let a = Tensor::<f32>::param(vec![1.0, 2.0], &[2]).unwrap();
        let b = no_grad(|| a.mul_scalar(2.0));
        assert!(!b.requires_grad());
        assert!(grad_enabled());
        let c = a.mul_scalar(2.0);
        assert!(c.requires_grad());
    }

    #[test]
    fn random_normal_bit_reproducible() {
        let a = Tensor::<f32>::random_normal(&[4, 5], &mut Rng::new(11));
        let b = Tensor::<f32>::random_normal(&[4, 5], &mut Rng::new(11));
        let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn update_data_copies_when_shared() {
        let mut a = Tensor::<f32>::param(vec![1.0], &[1]).unwrap();
        let keep = a.clone();
        a.update_data(|d| d[0] = 5.0);
        assert_eq!(a.data(), &[5.0]);
        assert_eq!(keep.data(), &[1.0]);
    }
}
