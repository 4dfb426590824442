use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use super::{NumericsError, Result, Scalar};
use crate::rng::normal;

/// Shape-tagged dense array in row-major order.
///
/// Data is behind an `Arc`, so cloning a tensor (or feeding it to a
/// [`super::Graph`] as a leaf) is cheap; mutation copies on write. The
/// gradient buffer, when present, always matches `data` in length, and a
/// tensor with `requires_grad == false` never accumulates one.
#[derive(Clone, Debug)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumericsError::ShapeDataMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: Arc::new(vec![S::zero(); numel]),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: S) -> Self {
        Self::new(vec![1], vec![v]).unwrap()
    }

    pub fn vector(data: Vec<S>) -> Self {
        let n = data.len();
        Self::new(vec![n], data).unwrap()
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Seeded Gaussian init with mean 0 and the given standard deviation.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data: Vec<S> = (0..numel)
            .map(|_| S::from_f64(normal(rng) * std))
            .collect();
        Self {
            shape,
            data: Arc::new(data),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Mutable view of the data; copies if the buffer is shared (e.g. a
    /// checkpoint snapshot holds the other reference).
    pub fn data_mut(&mut self) -> &mut [S] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Copy of this tensor that shares the value buffer but carries no
    /// gradient state. Used when registering values on a tape.
    pub(crate) fn shallow_copy(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn item(&self) -> S {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer. No-op on frozen tensors.
    pub fn accumulate_grad(&mut self, g: &[S]) {
        if !self.requires_grad {
            return;
        }
        debug_assert_eq!(g.len(), self.numel());
        let buf = self
            .grad
            .get_or_insert_with(|| vec![S::zero(); self.data.len()]);
        for (dst, src) in buf.iter_mut().zip(g) {
            *dst = *dst + *src;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn take_grad(&mut self) -> Option<Vec<S>> {
        self.grad.take()
    }

    /// Bitwise equality of the stored values (shape included).
    pub fn bits_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}
