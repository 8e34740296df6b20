//! Dense 4-D arrays in `(batch, channel, height, width)` order.

use std::fmt;

use crate::error::{Error, Result};

/// Extent of a [`Tensor4`] along its four axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Number of pixels in one channel plane.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn is_scalar(&self) -> bool {
        self.n == 1 && self.c == 1 && self.h == 1 && self.w == 1
    }

    pub fn with_c(self, c: usize) -> Self {
        Self { c, ..self }
    }

    pub fn with_hw(self, h: usize, w: usize) -> Self {
        Self { h, w, ..self }
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

impl From<(usize, usize, usize, usize)> for Shape4 {
    fn from((n, c, h, w): (usize, usize, usize, usize)) -> Self {
        Self::new(n, c, h, w)
    }
}

/// Row-major real tensor. The universal value type for images, features,
/// masks and gradients.
#[derive(Clone, PartialEq)]
pub struct Tensor4 {
    shape: Shape4,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(shape: impl Into<Shape4>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if data.len() != shape.numel() {
            return Err(Error::Contract(format!(
                "tensor of shape {shape} needs {} values, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Shape4>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Shape4>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Shape4>, value: f64) -> Self {
        let shape = shape.into();
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(Shape4::scalar(), value)
    }

    /// Builds a tensor by evaluating `f(n, c, h, w)` at every position.
    pub fn from_fn(shape: impl Into<Shape4>, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let shape = shape.into();
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.shape.index(n, c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut f64 {
        let i = self.shape.index(n, c, h, w);
        &mut self.data[i]
    }

    /// The single value of a `(1, 1, 1, 1)` tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.shape.is_scalar());
        self.data[0]
    }

    /// Contiguous slice holding channel plane `(n, c)`.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Channel range `[start, start + len)` as a new tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let s = self.shape;
        if start + len > s.c {
            return Err(Error::Contract(format!(
                "slice_channels: range {start}..{} outside {} channels",
                start + len,
                s.c
            )));
        }
        let out_shape = s.with_c(len);
        let mut out = Self::zeros(out_shape);
        for n in 0..s.n {
            for c in 0..len {
                out.plane_mut(n, c).copy_from_slice(self.plane(n, start + c));
            }
        }
        Ok(out)
    }
}

impl fmt::Debug for Tensor4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor4{} [", self.shape)?;
        for (i, x) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{x:.6}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}
