use std::fmt;

use crate::{Result, Scalar, TensorError};

/// Shape of a `(n, c, d, h, w)` tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape5 {
    pub n: usize,
    pub c: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape5 {
    pub const fn new(n: usize, c: usize, d: usize, h: usize, w: usize) -> Self {
        Shape5 { n, c, d, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.d * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Voxels per channel.
    pub const fn spatial(&self) -> usize {
        self.d * self.h * self.w
    }

    /// Elements per batch sample.
    pub const fn sample_len(&self) -> usize {
        self.c * self.spatial()
    }

    pub const fn with_channels(self, c: usize) -> Self {
        Shape5 { c, ..self }
    }

    pub const fn same_spatial(&self, other: &Shape5) -> bool {
        self.d == other.d && self.h == other.h && self.w == other.w
    }
}

impl fmt::Display for Shape5 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {}, {})", self.n, self.c, self.d, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor5<T> {
    shape: Shape5,
    data: Vec<T>,
}

impl<T: Scalar> Tensor5<T> {
    pub fn zeros(shape: Shape5) -> Self {
        Tensor5 {
            shape,
            data: vec![T::ZERO; shape.len()],
        }
    }

    pub fn filled(shape: Shape5, value: T) -> Self {
        Tensor5 {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape5, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(TensorError::LengthMismatch {
                op: "from_vec",
                len: data.len(),
                shape,
            });
        }
        Ok(Tensor5 { shape, data })
    }

    pub fn shape(&self) -> Shape5 {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, d: usize, h: usize, w: usize) -> usize {
        let s = &self.shape;
        (((n * s.c + c) * s.d + d) * s.h + h) * s.w + w
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, d: usize, h: usize, w: usize) -> T {
        self.data[self.index(n, c, d, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, d: usize, h: usize, w: usize, v: T) {
        let i = self.index(n, c, d, h, w);
        self.data[i] = v;
    }

    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.shape.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor5 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Converts element type, e.g. `f32` weights to `f64` for gradient checks.
    pub fn cast<U: Scalar>(&self) -> Tensor5<U> {
        Tensor5 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}
