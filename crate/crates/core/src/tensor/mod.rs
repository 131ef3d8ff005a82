//! Dense NCHW tensors and the raw kernels the rest of the stack builds on.
//!
//! Tensors are plain row-major buffers tagged with a [`Shape`]. They are
//! generic over the [`Element`] precision so the same kernels serve single
//! precision training and double precision gradient checking.

mod conv;
mod element;
mod io;

pub use conv::{conv2d, conv2d_backward_input, conv2d_backward_weight, conv2d_direct, conv_output_extent};
pub use element::Element;
pub use io::{read_tensor_dump, write_tensor_dump, TENSOR_MAGIC};

pub(crate) use element::gemm;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

/// Ordered list of extents, each at least one.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(Error::InvalidShape("rank must be at least 1".into()));
        }
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(Error::InvalidShape(format!("extent {pos} of {dims:?} is zero")));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::InvalidShape(format!("element count of {dims:?} overflows")))?;
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Extents of a rank-4 shape, or an error naming `op`.
    pub fn nchw(&self, op: &str) -> Result<[usize; 4]> {
        match self.0.as_slice() {
            &[n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::InvalidArgument(format!("{op}: expected rank-4 NCHW tensor, got {self}"))),
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn from_vec(dims: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape} needs {} elements, buffer has {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = vec![value; shape.numel()];
        Ok(Tensor { shape, data })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(dims, T::zero())
    }

    pub fn ones(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(dims, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: Shape(vec![1]), data: vec![value] }
    }

    pub(crate) fn zeros_like(other: &Tensor<T>) -> Self {
        Tensor { shape: other.shape.clone(), data: vec![T::zero(); other.data.len()] }
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
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

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::InvalidArgument(format!("item() on tensor of shape {}", self.shape)))
        }
    }

    pub fn reshape(self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.data.len() {
            return Err(Error::ShapeMismatch { op: "reshape", left: self.shape, right: shape });
        }
        Ok(Tensor { shape, data: self.data })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor<T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other, op)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub(crate) fn expect_same_shape(&self, other: &Tensor<T>, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch { op, left: self.shape.clone(), right: other.shape.clone() });
        }
        Ok(())
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x)
    }

    /// Largest absolute value; zero for an all-zero tensor, NaN if any element is NaN.
    pub fn max_abs(&self) -> T {
        let mut m = T::zero();
        for &x in &self.data {
            if x.is_nan() {
                return x;
            }
            m = m.max(x.abs());
        }
        m
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| U::from_f64(x.as_f64())).collect() }
    }
}

/// Elementwise product `out[i] = a[i] * b[i]`.
pub fn elementwise_mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, "elementwise_mul", |x, y| x * y)
}

pub fn elementwise_add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, "elementwise_add", |x, y| x + y)
}

/// Zero-pads the two spatial axes of an NCHW tensor by `amount` on every side.
pub fn pad2d<T: Element>(input: &Tensor<T>, amount: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.shape().nchw("pad2d")?;
    if amount == 0 {
        return Ok(input.clone());
    }
    let (ph, pw) = (h + 2 * amount, w + 2 * amount);
    let mut out = vec![T::zero(); n * c * ph * pw];
    for (plane_in, plane_out) in input.data.chunks_exact(h * w).zip(out.chunks_exact_mut(ph * pw)) {
        for y in 0..h {
            let dst = (y + amount) * pw + amount;
            plane_out[dst..dst + w].copy_from_slice(&plane_in[y * w..(y + 1) * w]);
        }
    }
    Tensor::from_vec(vec![n, c, ph, pw], out)
}

/// Removes `amount` rows and columns from every spatial border.
pub fn crop2d<T: Element>(input: &Tensor<T>, amount: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.shape().nchw("crop2d")?;
    if 2 * amount >= h || 2 * amount >= w {
        return Err(Error::InvalidArgument(format!(
            "crop2d: cannot remove {amount} from each side of {}",
            input.shape()
        )));
    }
    let (oh, ow) = (h - 2 * amount, w - 2 * amount);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in input.data.chunks_exact(h * w) {
        for y in amount..amount + oh {
            out.extend_from_slice(&plane[y * w + amount..y * w + amount + ow]);
        }
    }
    Tensor::from_vec(vec![n, c, oh, ow], out)
}

/// Derives an independent sub-seed for a numbered stream (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Reproducible normal draws: the same `(dims, seed)` always yields the same buffer.
pub fn seeded_normal<T: Element>(dims: impl Into<Vec<usize>>, mean: f64, std: f64, seed: u64) -> Result<Tensor<T>> {
    let shape = Shape::new(dims)?;
    if !(std >= 0.0) || !std.is_finite() || !mean.is_finite() {
        return Err(Error::InvalidArgument(format!("seeded_normal: bad parameters mean={mean} std={std}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(mean, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let data = (0..shape.numel()).map(|_| T::from_f64(dist.sample(&mut rng))).collect();
    Ok(Tensor { shape, data })
}

/// Reproducible uniform draws on `[low, high)`.
pub fn seeded_uniform<T: Element>(dims: impl Into<Vec<usize>>, low: f64, high: f64, seed: u64) -> Result<Tensor<T>> {
    let shape = Shape::new(dims)?;
    let dist = Uniform::new(low, high).map_err(|e| Error::InvalidArgument(format!("seeded_uniform: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.numel()).map(|_| T::from_f64(dist.sample(&mut rng))).collect();
    Ok(Tensor { shape, data })
}
