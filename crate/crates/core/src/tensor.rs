//! Dense real and complex 2-D tensors plus the seeded random stream used by
//! every stochastic component.
//!
//! Tensors are row-major `f64` buffers. Complex tensors store
//! [`Complex64`] entries, so their Euclidean norm runs over real and
//! imaginary components alike.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("payload length {len} does not match shape {rows}x{cols}")]
    Length {
        rows: usize,
        cols: usize,
        len: usize,
    },
    #[error("non-finite entry at index {0}")]
    NonFinite(usize),
    #[error("dimensions {rows}x{cols} must both be powers of two")]
    NotPowerOfTwo { rows: usize, cols: usize },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    Shape {
        left: (usize, usize),
        right: (usize, usize),
    },
}

/// Real-valued `rows x cols` image.
#[derive(Clone, Debug, PartialEq)]
pub struct RealTensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Complex-valued `rows x cols` tensor, used for k-space data and
/// perturbations.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor2 {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl RealTensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Builds a tensor from a row-major buffer, rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::Length {
                rows,
                cols,
                len: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(i));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Entrywise combination of two equally shaped tensors.
    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self, TensorError> {
        self.check_shape(other.shape())?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn dot(&self, other: &Self) -> Result<f64, TensorError> {
        self.check_shape(other.shape())?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_complex(&self) -> ComplexTensor2 {
        ComplexTensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        }
    }

    pub(crate) fn check_shape(&self, other: (usize, usize)) -> Result<(), TensorError> {
        if self.shape() != other {
            return Err(TensorError::Shape {
                left: self.shape(),
                right: other,
            });
        }
        Ok(())
    }
}

impl ComplexTensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Complex64>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::Length {
                rows,
                cols,
                len: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(i));
        }
        Ok(Self { rows, cols, data })
    }

    /// Assembles a complex tensor from separate real and imaginary parts.
    pub fn from_parts(re: &RealTensor2, im: &RealTensor2) -> Result<Self, TensorError> {
        re.check_shape(im.shape())?;
        Ok(Self {
            rows: re.rows,
            cols: re.cols,
            data: re
                .data
                .iter()
                .zip(&im.data)
                .map(|(&a, &b)| Complex64::new(a, b))
                .collect(),
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<Complex64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: Complex64) {
        self.data[row * self.cols + col] = value;
    }

    pub fn real(&self) -> RealTensor2 {
        RealTensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v.re).collect(),
        }
    }

    pub fn imag(&self) -> RealTensor2 {
        RealTensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v.im).collect(),
        }
    }

    pub fn zip_map(
        &self,
        other: &Self,
        f: impl Fn(Complex64, Complex64) -> Complex64,
    ) -> Result<Self, TensorError> {
        self.check_shape(other.shape())?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }

    /// Real inner product `Re <self, other>` over the real-pair embedding.
    pub fn real_dot(&self, other: &Self) -> Result<f64, TensorError> {
        self.check_shape(other.shape())?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.re * b.re + a.im * b.im)
            .sum())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_shape(&self, other: (usize, usize)) -> Result<(), TensorError> {
        if self.shape() != other {
            return Err(TensorError::Shape {
                left: self.shape(),
                right: other,
            });
        }
        Ok(())
    }
}

/// Euclidean norm over every real scalar a tensor holds.
pub trait L2Norm {
    fn l2_norm(&self) -> f64;
}

impl L2Norm for RealTensor2 {
    fn l2_norm(&self) -> f64 {
        RealTensor2::l2_norm(self)
    }
}

impl L2Norm for ComplexTensor2 {
    fn l2_norm(&self) -> f64 {
        ComplexTensor2::l2_norm(self)
    }
}

impl L2Norm for [f64] {
    fn l2_norm(&self) -> f64 {
        self.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn l2_norm<T: L2Norm + ?Sized>(t: &T) -> f64 {
    t.l2_norm()
}

/// Name of the generator behind [`RngStream`].
pub const RNG_ALGORITHM: &str = "chacha8";

/// Seeded, single-owner random stream (ChaCha8). Equal seeds give equal
/// sequences on every platform.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn algorithm(&self) -> &'static str {
        RNG_ALGORITHM
    }

    /// Independent child stream keyed by `tag`, for fan-out to workers.
    pub fn fork(&self, tag: u64) -> RngStream {
        RngStream::new(derive_seed(self.seed, tag))
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.rng);
    }

    /// `amount` distinct indices from `0..n`, uniformly without replacement.
    pub fn sample_indices(&mut self, n: usize, amount: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.rng, n, amount).into_vec()
    }
}

/// SplitMix64 mix of a base seed and a stream tag.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(tag.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// i.i.d. standard normal real tensor.
pub fn gaussian_real(rng: &mut RngStream, rows: usize, cols: usize) -> RealTensor2 {
    let data = (0..rows * cols).map(|_| rng.normal()).collect();
    RealTensor2 { rows, cols, data }
}

/// Complex tensor with independent standard normal real and imaginary parts
/// (real drawn first for each entry).
pub fn gaussian_complex(rng: &mut RngStream, rows: usize, cols: usize) -> ComplexTensor2 {
    let data = (0..rows * cols)
        .map(|_| {
            let re = rng.normal();
            let im = rng.normal();
            Complex64::new(re, im)
        })
        .collect();
    ComplexTensor2 { rows, cols, data }
}

/// Either flavour of 2-D tensor; what [`crate::io::load_tensor`] returns.
#[derive(Clone, Debug, PartialEq)]
pub enum Tensor2 {
    Real(RealTensor2),
    Complex(ComplexTensor2),
}

impl From<RealTensor2> for Tensor2 {
    fn from(t: RealTensor2) -> Self {
        Tensor2::Real(t)
    }
}

impl From<ComplexTensor2> for Tensor2 {
    fn from(t: ComplexTensor2) -> Self {
        Tensor2::Complex(t)
    }
}

/// Standard normal tensor of either flavour.
pub fn gaussian_tensor(rng: &mut RngStream, rows: usize, cols: usize, complex: bool) -> Tensor2 {
    if complex {
        gaussian_complex(rng, rows, cols).into()
    } else {
        gaussian_real(rng, rows, cols).into()
    }
}
