//! Single-coil Cartesian acquisition: `y = M ⊙ F x + M ⊙ noise`.
//!
//! k-space is kept unshifted (DC at index `(0, 0)`); the "center band" of a
//! mask therefore means the lowest-|frequency| rows, which wrap around row 0.
//! Measurements are stored zero-filled on the full grid.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fft::{fft2_real, ifft2};
use crate::tensor::{gaussian_complex, ComplexTensor2, RealTensor2, RngStream, TensorError};

#[derive(Debug, Error, PartialEq)]
pub enum MriError {
    #[error("acceleration must be >= 1, got {0}")]
    Acceleration(f64),
    #[error("center fraction must lie in [0, 1], got {0}")]
    CenterFraction(f64),
    #[error("line budget {budget} is smaller than the {center} center lines")]
    Budget { budget: usize, center: usize },
    #[error("mask is {mask:?} but data is {data:?}")]
    MaskShape {
        mask: (usize, usize),
        data: (usize, usize),
    },
    #[error("mask tensor entries must be 0 or 1 and constant along each row")]
    MaskValues,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Row-wise Cartesian sampling pattern `Λ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingMask {
    rows: usize,
    cols: usize,
    selected: Vec<bool>,
    acceleration: f64,
    center_fraction: f64,
}

/// Indices of the `count` lowest-frequency rows in unshifted order.
fn center_rows(rows: usize, count: usize) -> Vec<usize> {
    // centered (fftshift) window [pad, pad + count), mapped back to unshifted
    let pad = (rows - count + 1) / 2;
    (pad..pad + count)
        .map(|s| (s + rows - rows / 2) % rows)
        .collect()
}

impl SamplingMask {
    /// Random Cartesian line mask: `floor(rows / acceleration)` lines, the
    /// central `floor(center_fraction * rows)` always present, the rest drawn
    /// uniformly without replacement.
    pub fn cartesian(
        rows: usize,
        cols: usize,
        acceleration: f64,
        center_fraction: f64,
        rng: &mut RngStream,
    ) -> Result<Self, MriError> {
        if !(acceleration >= 1.0) || !acceleration.is_finite() {
            return Err(MriError::Acceleration(acceleration));
        }
        if !(0.0..=1.0).contains(&center_fraction) {
            return Err(MriError::CenterFraction(center_fraction));
        }
        let budget = (rows as f64 / acceleration).floor() as usize;
        let center = (center_fraction * rows as f64).floor() as usize;
        if budget < center {
            return Err(MriError::Budget { budget, center });
        }
        let mut selected = vec![false; rows];
        for r in center_rows(rows, center) {
            selected[r] = true;
        }
        let outer: Vec<usize> = (0..rows).filter(|&r| !selected[r]).collect();
        for i in rng.sample_indices(outer.len(), budget - center) {
            selected[outer[i]] = true;
        }
        Ok(Self {
            rows,
            cols,
            selected,
            acceleration,
            center_fraction,
        })
    }

    /// Every line measured.
    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            selected: vec![true; rows],
            acceleration: 1.0,
            center_fraction: 1.0,
        }
    }

    /// Mask from an explicit line selection.
    pub fn from_lines(cols: usize, selected: Vec<bool>) -> Self {
        let rows = selected.len();
        let lines = selected.iter().filter(|&&s| s).count().max(1);
        Self {
            rows,
            cols,
            selected,
            acceleration: rows as f64 / lines as f64,
            center_fraction: 0.0,
        }
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

    pub fn acceleration(&self) -> f64 {
        self.acceleration
    }

    pub fn center_fraction(&self) -> f64 {
        self.center_fraction
    }

    pub fn lines(&self) -> &[bool] {
        &self.selected
    }

    pub fn is_selected(&self, row: usize) -> bool {
        self.selected[row]
    }

    pub fn num_lines(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }

    /// `m = tr(Λ)`, the number of measured k-space entries.
    pub fn num_measured(&self) -> usize {
        self.num_lines() * self.cols
    }

    /// Lines guaranteed by the center band of this mask.
    pub fn center_lines(&self) -> Vec<usize> {
        let count = (self.center_fraction * self.rows as f64).floor() as usize;
        center_rows(self.rows, count.min(self.rows))
    }

    /// Per-entry 0/1 weights, row-major.
    pub fn weights(&self) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.rows * self.cols);
        for &s in &self.selected {
            w.extend(std::iter::repeat_n(if s { 1.0 } else { 0.0 }, self.cols));
        }
        w
    }

    pub fn check(&self, shape: (usize, usize)) -> Result<(), MriError> {
        if self.shape() != shape {
            return Err(MriError::MaskShape {
                mask: self.shape(),
                data: shape,
            });
        }
        Ok(())
    }

    /// `Λ k`: unselected rows set to exactly zero.
    pub fn apply(&self, k: &ComplexTensor2) -> Result<ComplexTensor2, MriError> {
        self.check(k.shape())?;
        let mut out = k.clone();
        let zero = Complex64::new(0.0, 0.0);
        for (r, row) in out.data_mut().chunks_exact_mut(self.cols).enumerate() {
            if !self.selected[r] {
                row.fill(zero);
            }
        }
        Ok(out)
    }

    /// Dense 0/1 map for serialization.
    pub fn to_tensor(&self) -> RealTensor2 {
        RealTensor2::from_vec(self.rows, self.cols, self.weights()).expect("shape by construction")
    }

    pub fn from_tensor(t: &RealTensor2) -> Result<Self, MriError> {
        let mut selected = Vec::with_capacity(t.rows());
        for r in 0..t.rows() {
            let first = t.get(r, 0);
            if first != 0.0 && first != 1.0 {
                return Err(MriError::MaskValues);
            }
            if (0..t.cols()).any(|c| t.get(r, c) != first) {
                return Err(MriError::MaskValues);
            }
            selected.push(first == 1.0);
        }
        Ok(Self::from_lines(t.cols(), selected))
    }
}

/// Convenience wrapper around [`SamplingMask::cartesian`] for square grids.
pub fn make_cartesian_mask(
    rows: usize,
    acceleration: f64,
    center_fraction: f64,
    rng: &mut RngStream,
) -> Result<SamplingMask, MriError> {
    SamplingMask::cartesian(rows, rows, acceleration, center_fraction, rng)
}

/// Complex Gaussian k-space noise with per-component std `sigma`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma: f64,
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        Self { sigma: 0.0 }
    }
}

/// Zero-filled measured k-space with its acquisition description.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub ksp: ComplexTensor2,
    pub mask: SamplingMask,
    pub noise: NoiseModel,
}

impl Measurement {
    /// Wraps already-masked k-space; unselected rows are re-zeroed.
    pub fn new(
        ksp: ComplexTensor2,
        mask: SamplingMask,
        noise: NoiseModel,
    ) -> Result<Self, MriError> {
        let ksp = mask.apply(&ksp)?;
        Ok(Self { ksp, mask, noise })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.ksp.shape()
    }
}

/// Noise-free `A x = Λ F x`.
pub fn apply_forward(x: &RealTensor2, mask: &SamplingMask) -> Result<ComplexTensor2, MriError> {
    mask.check(x.shape())?;
    mask.apply(&fft2_real(x)?)
}

/// `A^H k = Re F^{-1} Λ k`, the adjoint of [`apply_forward`] on real images.
pub fn apply_adjoint(k: &ComplexTensor2, mask: &SamplingMask) -> Result<RealTensor2, MriError> {
    Ok(ifft2(&mask.apply(k)?)?.real())
}

/// Simulates an acquisition. The full complex noise field is always drawn
/// (so the rng advances identically regardless of the mask) and then masked.
pub fn forward(
    x: &RealTensor2,
    mask: &SamplingMask,
    noise: NoiseModel,
    rng: &mut RngStream,
) -> Result<Measurement, MriError> {
    mask.check(x.shape())?;
    let mut k = fft2_real(x)?;
    if noise.sigma > 0.0 {
        let field = gaussian_complex(rng, x.rows(), x.cols());
        for (v, e) in k.data_mut().iter_mut().zip(field.data()) {
            *v += e * noise.sigma;
        }
    }
    Ok(Measurement {
        ksp: mask.apply(&k)?,
        mask: mask.clone(),
        noise,
    })
}

/// Zero-filled reconstruction `A^H y`.
pub fn adjoint(meas: &Measurement) -> Result<RealTensor2, MriError> {
    apply_adjoint(&meas.ksp, &meas.mask)
}
