//! Dense rank-4 tensors and a tape-based reverse-mode differentiation engine.
//!
//! Every tensor is laid out as `(n, c, h, w)` in row-major order. Vectors and
//! matrices are carried as rank-4 tensors with trailing unit dimensions, so a
//! length-`d` feature vector per sample is `(n, d, 1, 1)`.
//!
//! Differentiation is driven by [`Graph`]: leaves are registered on the graph,
//! every op records its operands, and [`Graph::backward`] replays the tape in
//! reverse. A graph serves exactly one forward pass.

mod element;
mod graph;
pub mod gradcheck;
pub(crate) mod kernels;

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub use element::{DType, Element};
pub use graph::{Gradients, Graph, Var};

use crate::error::{Error, Result};

/// `(n, c, h, w)`.
pub type Shape = [usize; 4];

pub fn numel(shape: Shape) -> usize {
    shape.iter().product()
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T: Element = f64> {
    shape: Shape,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("dtype", &T::DTYPE)
            .field("requires_grad", &self.requires_grad)
            .field("has_grad", &self.grad.is_some())
            .finish()
    }
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(Error::InvalidArgument(format!(
                "tensor of shape {shape:?} needs {} elements, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Self {
            shape,
            data: vec![value; numel(shape)],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::full([1, 1, 1, 1], value)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let mut data = Vec::with_capacity(numel(shape));
        for n in 0..shape[0] {
            for c in 0..shape[1] {
                for h in 0..shape[2] {
                    for w in 0..shape[3] {
                        data.push(f([n, c, h, w]));
                    }
                }
            }
        }
        Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Samples from `U(low, high)`.
    pub fn uniform(shape: Shape, low: f64, high: f64, rng: &mut impl Rng) -> Self {
        let data = (0..numel(shape))
            .map(|_| T::cast(rng.random_range(low..high)))
            .collect();
        Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Samples from `N(0, std^2)`.
    pub fn randn(shape: Shape, std: f64, rng: &mut impl Rng) -> Self {
        let data = (0..numel(shape))
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::cast(z * std)
            })
            .collect();
        Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient accumulator, creating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[T]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::InvalidArgument(format!(
                "gradient of length {} for tensor of shape {:?}",
                delta.len(),
                self.shape
            )));
        }
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(delta.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    fn offset(&self, idx: [usize; 4]) -> usize {
        let [_, c, h, w] = self.shape;
        ((idx[0] * c + idx[1]) * h + idx[2]) * w + idx[3]
    }

    pub fn get(&self, idx: [usize; 4]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: [usize; 4], value: T) {
        let o = self.offset(idx);
        self.data[o] = value;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "dot",
                lhs: self.shape,
                rhs: other.shape,
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|x| U::cast(x.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|x| U::cast(x.as_f64())).collect()),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    /// One sample of a batch as a `(1, c, h, w)` tensor.
    pub fn sample(&self, index: usize) -> Self {
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        Self {
            shape: [1, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[index * per..(index + 1) * per].to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Stacks equally shaped tensors along the batch axis.
    pub fn stack(parts: &[Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of zero tensors".into()))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    lhs: first.shape,
                    rhs: p.shape,
                });
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Tensor::new([n, c, h, w], data)
    }

    /// Pads bottom and right edges by reflection (without repeating the edge row).
    pub fn reflect_pad(&self, pad_h: usize, pad_w: usize) -> Result<Self> {
        let [n, c, h, w] = self.shape;
        if (pad_h > 0 && pad_h >= h) || (pad_w > 0 && pad_w >= w) {
            return Err(Error::InvalidArgument(format!(
                "reflection pad ({pad_h}, {pad_w}) too large for {h}x{w}"
            )));
        }
        let reflect = |i: usize, len: usize| if i < len { i } else { 2 * (len - 1) - i };
        Ok(Tensor::from_fn([n, c, h + pad_h, w + pad_w], |[b, ch, y, x]| {
            self.get([b, ch, reflect(y, h), reflect(x, w)])
        }))
    }
}
