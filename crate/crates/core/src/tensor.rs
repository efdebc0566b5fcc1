//! Dense 4-D tensors stored in (batch, channel, row, col) order.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Extent of a [`Tensor4`] along each axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const SCALAR: Dims = Dims {
        n: 1,
        c: 1,
        h: 1,
        w: 1,
    };

    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Dims { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements in one (h, w) plane.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements in one batch sample.
    pub const fn sample(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn is_scalar(&self) -> bool {
        self.len() == 1
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.n == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::shape("tensor", format!("all dims must be >= 1, got {self}")));
        }
        Ok(())
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// A dense tensor with an optional gradient buffer of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    dims: Dims,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor4 {
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        dims.validate()?;
        if data.len() != dims.len() {
            return Err(Error::shape(
                "tensor",
                format!("{} values do not fill {dims}", data.len()),
            ));
        }
        Ok(Tensor4 {
            dims,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(dims: Dims) -> Result<Self> {
        Self::full(dims, 0.0)
    }

    pub fn ones(dims: Dims) -> Result<Self> {
        Self::full(dims, 1.0)
    }

    pub fn full(dims: Dims, value: f64) -> Result<Self> {
        dims.validate()?;
        Self::new(dims, vec![value; dims.len()])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor4 {
            dims: Dims::SCALAR,
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    /// Builds a 1x1x1xW row vector; handy for small hand-written cases.
    pub fn row(values: &[f64]) -> Result<Self> {
        Self::new(Dims::new(1, 1, 1, values.len()), values.to_vec())
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Result<Self> {
        dims.validate()?;
        let mut data = Vec::with_capacity(dims.len());
        for n in 0..dims.n {
            for c in 0..dims.c {
                for h in 0..dims.h {
                    for w in 0..dims.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Self::new(dims, data)
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(dims: Dims, lo: f64, hi: f64, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let data = (0..dims.len()).map(|_| rng.random_range(lo..hi)).collect();
        Self::new(dims, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.set_requires_grad(on);
        self
    }

    /// Resets the gradient buffer to zeros (allocating it if absent).
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }

    pub(crate) fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient buffer.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("{} gradient values for {}", delta.len(), self.dims),
            ));
        }
        let g = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (g, d) in g.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.dims.offset(n, c, h, w)]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f64) {
        let i = self.dims.offset(n, c, h, w);
        self.data[i] = v;
    }

    /// The (h, w) plane of channel `c` in sample `n`.
    pub fn channel(&self, n: usize, c: usize) -> &[f64] {
        let start = self.dims.offset(n, c, 0, 0);
        &self.data[start..start + self.dims.plane()]
    }

    /// All channels of sample `n`.
    pub fn sample(&self, n: usize) -> &[f64] {
        let start = n * self.dims.sample();
        &self.data[start..start + self.dims.sample()]
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.dims.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::shape("item", format!("{} is not a scalar", self.dims)))
        }
    }

    pub fn reshaped(mut self, dims: Dims) -> Result<Self> {
        dims.validate()?;
        if dims.len() != self.dims.len() {
            return Err(Error::shape("reshape", format!("{} -> {dims}", self.dims)));
        }
        self.dims = dims;
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), dims.len());
        }
        Ok(self)
    }

    /// Concatenates tensors with equal (c, h, w) along the batch axis.
    pub fn stack(parts: &[Tensor4]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("stack of zero tensors".into()))?;
        let d = first.dims;
        let mut data = Vec::with_capacity(d.sample() * parts.len() * d.n);
        let mut n = 0;
        for p in parts {
            if (p.dims.c, p.dims.h, p.dims.w) != (d.c, d.h, d.w) {
                return Err(Error::shape("stack", format!("{} vs {}", p.dims, d)));
            }
            data.extend_from_slice(&p.data);
            n += p.dims.n;
        }
        Self::new(Dims::new(n, d.c, d.h, d.w), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length_and_zero_dims() {
        assert!(Tensor4::new(Dims::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
        assert!(Tensor4::zeros(Dims::new(1, 0, 2, 2)).is_err());
    }

    #[test]
    fn offsets_are_row_major_nchw() {
        let t = Tensor4::from_fn(Dims::new(2, 3, 4, 5), |n, c, h, w| {
            (n * 1000 + c * 100 + h * 10 + w) as f64
        })
        .unwrap();
        assert_eq!(t.at(1, 2, 3, 4), 1234.0);
        assert_eq!(t.channel(1, 2)[0], 1200.0);
        assert_eq!(t.sample(1)[0], 1000.0);
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor4::row(&[1.0, 2.0]).unwrap().with_requires_grad(true);
        t.accumulate_grad(&[1.0, 1.0]).unwrap();
        t.accumulate_grad(&[0.5, 2.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.5, 3.0]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0]);
        assert!(t.accumulate_grad(&[1.0]).is_err());
    }

    #[test]
    fn stack_concatenates_batches() {
        let a = Tensor4::row(&[1.0, 2.0]).unwrap();
        let b = Tensor4::row(&[3.0, 4.0]).unwrap();
        let s = Tensor4::stack(&[a, b]).unwrap();
        assert_eq!(s.dims(), Dims::new(2, 1, 1, 2));
        assert_eq!(s.data(), &[1.0, 2.0, 3.0, 4.0]);
    }
}
