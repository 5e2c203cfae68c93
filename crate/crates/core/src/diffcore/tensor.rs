use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// `(batch, channels, height, width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape4(pub [usize; 4]);

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape4([n, c, h, w])
    }

    pub const fn scalar() -> Self {
        Shape4([1, 1, 1, 1])
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }

    /// Elements in one `(c, h, w)` sample.
    pub fn sample_len(&self) -> usize {
        self.c() * self.h() * self.w()
    }

    pub fn plane(&self) -> usize {
        self.h() * self.w()
    }

    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "({n},{c},{h},{w})")
    }
}

/// Dense rank-4 array of `f64`, row-major in `(n, c, h, w)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    shape: Shape4,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor4 {
    pub fn from_vec(shape: Shape4, data: Vec<f64>) -> Result<Self> {
        if shape.0.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("tensor dimensions must be positive, got {shape}")));
        }
        if data.len() != shape.len() {
            return Err(Error::shape("tensor", shape.len(), data.len()));
        }
        Ok(Tensor4 {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Shape4) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape4, v: f64) -> Self {
        assert!(shape.0.iter().all(|&d| d > 0), "tensor dimensions must be positive");
        Tensor4 {
            shape,
            data: vec![v; shape.len()],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::full(Shape4::scalar(), v)
    }

    pub fn randn(shape: Shape4, std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..shape.len()).map(|_| normal.sample(rng)).collect();
        Tensor4 {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn uniform(shape: Shape4, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let data = (0..shape.len()).map(|_| rng.random_range(lo..hi)).collect();
        Tensor4 {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.requires_grad = on;
        self
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a `(1,1,1,1)` tensor, or the first element otherwise.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        let s = self.shape;
        self.data[((n * s.c() + c) * s.h() + h) * s.w() + w]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f64) {
        let s = self.shape;
        self.data[((n * s.c() + c) * s.h() + h) * s.w() + w] = v;
    }

    pub fn sample(&self, n: usize) -> &[f64] {
        let len = self.shape.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    /// Single-sample tensor holding batch element `n`.
    pub fn slice_sample(&self, n: usize) -> Tensor4 {
        let s = self.shape;
        Tensor4::from_vec(Shape4::new(1, s.c(), s.h(), s.w()), self.sample(n).to_vec())
            .expect("slice of a valid tensor")
    }

    /// Concatenates equally shaped samples along the batch axis.
    pub fn stack(samples: &[Tensor4]) -> Result<Tensor4> {
        let first = samples
            .first()
            .ok_or_else(|| Error::invalid("cannot stack an empty list"))?
            .shape;
        let mut data = Vec::new();
        let mut n = 0;
        for s in samples {
            let sh = s.shape;
            if sh.c() != first.c() || sh.h() != first.h() || sh.w() != first.w() {
                return Err(Error::shape("stack", first, sh));
            }
            n += sh.n();
            data.extend_from_slice(&s.data);
        }
        Tensor4::from_vec(Shape4::new(n, first.c(), first.h(), first.w()), data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn dot(&self, other: &Tensor4) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("dot", self.shape, other.shape));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }
}

/// Geometry of a square-kernel convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.kernel == 0 || self.stride == 0 {
            return Err(Error::invalid(format!(
                "conv spec needs positive channels, kernel and stride: {self:?}"
            )));
        }
        Ok(())
    }

    /// Output extent of a forward convolution over an input of extent `size`.
    pub fn conv_out(&self, size: usize) -> Option<usize> {
        let padded = size + 2 * self.padding;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    /// Output extent of a transposed convolution over an input of extent `size`.
    pub fn transpose_out(&self, size: usize) -> Option<usize> {
        ((size - 1) * self.stride + self.kernel).checked_sub(2 * self.padding).filter(|&v| v > 0)
    }

    pub fn conv_weight_shape(&self) -> Shape4 {
        Shape4::new(self.out_channels, self.in_channels, self.kernel, self.kernel)
    }

    /// Transposed convolution weights are laid out `[in, out, k, k]` so that
    /// the same array serves as the adjoint of a forward convolution.
    pub fn transpose_weight_shape(&self) -> Shape4 {
        Shape4::new(self.in_channels, self.out_channels, self.kernel, self.kernel)
    }
}
