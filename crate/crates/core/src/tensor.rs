//! Dense rank-4 NCHW tensors.
//!
//! `Tensor<f32>` is the production type. `Tensor<f64>` exists for
//! finite-difference gradient checks, where single precision cannot
//! resolve a `1e-4` relative tolerance.

use std::fmt;
use std::iter::Sum;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Scalar types a [`Tensor`] can hold.
pub trait Element: Float + Default + Sum + fmt::Debug + fmt::Display + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn erf(self) -> Self;

    /// `C = alpha * A B + beta * C` on strided matrices; see
    /// [`crate::nnops::gemm`] for the checked entry point.
    ///
    /// # Safety
    /// Every element addressed through the dimensions and strides must lie
    /// inside the buffers behind `a`, `b` and `c`, and `c` must not alias
    /// `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn erf(self) -> Self {
        libm::erff(self)
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// `(batch, channels, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    pub const fn scalar() -> Self {
        Shape([1, 1, 1, 1])
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

    /// Number of elements, or a size error if the product overflows.
    pub fn numel(&self) -> Result<usize> {
        self.0
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= isize::MAX as usize)
            .ok_or(Error::Size(self.0))
    }

    /// Spatial plane size `h * w`.
    pub fn plane(&self) -> usize {
        self.h() * self.w()
    }

    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c() + c) * self.h() + h) * self.w() + w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "({n}, {c}, {h}, {w})")
    }
}

impl From<[usize; 4]> for Shape {
    fn from(dims: [usize; 4]) -> Self {
        Shape(dims)
    }
}

/// Initialization scheme for [`Tensor::create`].
#[derive(Debug)]
pub enum Init<'r> {
    Zeros,
    Ones,
    Constant(f64),
    Uniform {
        rng: &'r mut Rng,
        lo: f64,
        hi: f64,
    },
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    Kaiming {
        rng: &'r mut Rng,
        fan_in: usize,
    },
    /// Normal with the given standard deviation, truncated at two sigma.
    TruncNormal {
        rng: &'r mut Rng,
        std: f64,
    },
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

pub type Tensor64 = Tensor<f64>;

impl<T: Element> Tensor<T> {
    pub fn new(shape: impl Into<Shape>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel = shape.numel()?;
        if data.len() != numel {
            return Err(Error::shape("tensor", format!("{} values for shape {shape}", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn create(shape: impl Into<Shape>, init: Init<'_>) -> Result<Self> {
        let shape = shape.into();
        let numel = shape.numel()?;
        let data = match init {
            Init::Zeros => vec![T::zero(); numel],
            Init::Ones => vec![T::one(); numel],
            Init::Constant(c) => vec![T::from_f64(c); numel],
            Init::Uniform { rng, lo, hi } => {
                if !(lo <= hi) {
                    return Err(Error::Contract(format!("uniform bounds {lo} > {hi}")));
                }
                (0..numel).map(|_| T::from_f64(rng.uniform(lo, hi))).collect()
            }
            Init::Kaiming { rng, fan_in } => {
                if fan_in == 0 {
                    return Err(Error::Contract("kaiming init needs fan_in > 0".into()));
                }
                let std = (2.0 / fan_in as f64).sqrt();
                (0..numel).map(|_| T::from_f64(std * rng.normal())).collect()
            }
            Init::TruncNormal { rng, std } => {
                (0..numel).map(|_| T::from_f64(std * rng.truncated_normal(2.0))).collect()
            }
        };
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        Self::create(shape, Init::Zeros).expect("zeros: shape overflow")
    }

    pub fn full(shape: impl Into<Shape>, value: T) -> Self {
        let shape = shape.into();
        let numel = shape.numel().expect("full: shape overflow");
        Tensor { shape, data: vec![value; numel] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: Shape::scalar(), data: vec![value] }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Tensor { shape: other.shape, data: vec![T::zero(); other.data.len()] }
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.numel().ok(), Some(data.len()));
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn dims(&self) -> [usize; 4] {
        self.shape.0
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.index(n, c, h, w)]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.shape.index(n, c, h, w);
        self.data[i] = v;
    }

    /// The single value of a `(1, 1, 1, 1)` tensor.
    pub fn item(&self) -> Result<T> {
        if self.shape != Shape::scalar() {
            return Err(Error::shape("item", format!("expected a scalar, got {}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn reshape(self, shape: impl Into<Shape>) -> Result<Self> {
        let shape = shape.into();
        if shape.numel()? != self.data.len() {
            return Err(Error::mismatch("reshape", self.shape, shape));
        }
        Ok(Tensor { shape, data: self.data })
    }

    /// Converts element type (f32 <-> f64).
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect() }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::mismatch(op, self.shape, other.shape));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape, data })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    /// In-place `self += other`.
    pub fn accumulate(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::mismatch("accumulate", self.shape, other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    /// `out[n,c,h,w] = x[n,c,h,w] * s[n,c,0,0]`.
    pub fn mul_channelwise(&self, s: &Self) -> Result<Self> {
        let [n, c, h, w] = self.dims();
        if s.dims() != [n, c, 1, 1] {
            return Err(Error::shape(
                "mul_channelwise",
                format!("scale {} does not match {} as (N, C, 1, 1)", s.shape, self.shape),
            ));
        }
        let plane = h * w;
        let mut data = self.data.clone();
        if plane > 0 {
            for (chunk, &k) in data.chunks_mut(plane).zip(&s.data) {
                chunk.iter_mut().for_each(|v| *v = *v * k);
            }
        }
        Ok(Tensor { shape: self.shape, data })
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::mismatch("max_abs_diff", self.shape, other.shape));
        }
        Ok(self.data.iter().zip(&other.data).fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN
    /// payloads.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.data.iter().zip(&other.data).all(|(&a, &b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{} [", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:?}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ... ({} more)", self.data.len() - SHOWN)?;
        }
        write!(f, "]")
    }
}
