//! Dense rank-4 tensors in batch/channel/height/width layout, the
//! differentiable operations defined on them, and the reverse-mode tape.

mod scalar;

pub mod ops;
pub mod tape;

use std::fmt;
use std::sync::Arc;

pub use scalar::Scalar;

use crate::error::{Error, Result};

/// Dimensions of a rank-4 tensor: batch, channels, height, width.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Shape {
        Shape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Flat index of element (n, c, y, x) in row-major n -> c -> h -> w order.
    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(n < self.n && c < self.c && y < self.h && x < self.w);
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Immutable dense tensor. Cloning is cheap: the payload is shared.
#[derive(Clone, Debug)]
pub struct Tensor<T> {
    shape: Shape,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Tensor<T>> {
        if shape.n == 0 || shape.c == 0 || shape.h == 0 || shape.w == 0 {
            return Err(Error::shape(format!(
                "all tensor dimensions must be >= 1, got {shape}"
            )));
        }
        if data.len() != shape.numel() {
            return Err(Error::shape(format!(
                "data length {} does not match shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    pub fn zeros(shape: Shape) -> Tensor<T> {
        Tensor { shape, data: Arc::new(vec![T::zero(); shape.numel()]) }
    }

    pub fn filled(shape: Shape, v: T) -> Tensor<T> {
        Tensor { shape, data: Arc::new(vec![v; shape.numel()]) }
    }

    /// Builds a tensor by evaluating `f` at every (n, c, y, x).
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Tensor<T> {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor { shape, data: Arc::new(data) }
    }

    pub fn scalar(v: T) -> Tensor<T> {
        Tensor::filled(Shape::new(1, 1, 1, 1), v)
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.shape.idx(n, c, y, x)]
    }

    /// The single element of a (1,1,1,1) tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-wise precision conversion.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: Arc::new(self.data.iter().map(|v| U::of_f64(v.as_f64())).collect()),
        }
    }

    /// Stacks single-batch tensors along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::argument("cannot stack an empty tensor list"))?;
        let s = first.shape();
        let mut data = Vec::with_capacity(items.iter().map(|t| t.numel()).sum());
        let mut n = 0;
        for t in items {
            let ts = t.shape();
            if (ts.c, ts.h, ts.w) != (s.c, s.h, s.w) {
                return Err(Error::shape(format!(
                    "stack: mismatched item shapes {ts} vs {s}"
                )));
            }
            n += ts.n;
            data.extend_from_slice(t.data());
        }
        Tensor::new(Shape::new(n, s.c, s.h, s.w), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_indexing_is_row_major() {
        let s = Shape::new(2, 3, 4, 5);
        assert_eq!(s.numel(), 120);
        assert_eq!(s.idx(0, 0, 0, 0), 0);
        assert_eq!(s.idx(0, 0, 0, 1), 1);
        assert_eq!(s.idx(0, 0, 1, 0), 5);
        assert_eq!(s.idx(0, 1, 0, 0), 20);
        assert_eq!(s.idx(1, 0, 0, 0), 60);
        assert_eq!(s.idx(1, 2, 3, 4), 119);
    }

    #[test]
    fn new_rejects_wrong_data_length() {
        assert!(Tensor::<f32>::new(Shape::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
    }

    #[test]
    fn new_rejects_zero_dimension() {
        assert!(Tensor::<f32>::new(Shape::new(1, 0, 2, 2), vec![]).is_err());
    }

    #[test]
    fn stack_concatenates_batches() {
        let a = Tensor::<f32>::filled(Shape::new(1, 2, 2, 2), 1.0);
        let b = Tensor::<f32>::filled(Shape::new(1, 2, 2, 2), 2.0);
        let s = Tensor::stack(&[a, b]).unwrap();
        assert_eq!(s.shape(), Shape::new(2, 2, 2, 2));
        assert_eq!(s.at(0, 0, 0, 0), 1.0);
        assert_eq!(s.at(1, 1, 1, 1), 2.0);
    }
}
