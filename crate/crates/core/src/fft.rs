//! Unitary radix-2 2-D FFT.
//!
//! Both directions scale by `1/sqrt(rows * cols)`, so `fft2` is an
//! orthonormal map and `ifft2` is its exact adjoint. Norm budgets measured
//! in k-space therefore equal the same budgets measured in image space.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::tensor::{ComplexTensor2, RealTensor2, TensorError};

/// Precomputed forward twiddles `exp(-2 pi i k / n)` for `k < n/2`.
struct Twiddles {
    n: usize,
    table: Vec<Complex64>,
}

impl Twiddles {
    fn new(n: usize) -> Self {
        let table = (0..n / 2)
            .map(|k| {
                let angle = -2.0 * PI * k as f64 / n as f64;
                Complex64::new(angle.cos(), angle.sin())
            })
            .collect();
        Self { n, table }
    }
}

fn bit_reverse_permute(buf: &mut [Complex64]) {
    let n = buf.len();
    let bits = n.trailing_zeros();
    if bits == 0 {
        return;
    }
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
}

/// Unnormalized in-place iterative Cooley-Tukey transform.
fn fft_1d(buf: &mut [Complex64], tw: &Twiddles, inverse: bool) {
    let n = buf.len();
    debug_assert_eq!(n, tw.n);
    bit_reverse_permute(buf);
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let stride = n / len;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let mut w = tw.table[k * stride];
                if inverse {
                    w = w.conj();
                }
                let a = buf[start + k];
                let b = buf[start + k + half] * w;
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
}

fn check_dims(rows: usize, cols: usize) -> Result<(), TensorError> {
    if rows.is_power_of_two() && cols.is_power_of_two() {
        Ok(())
    } else {
        Err(TensorError::NotPowerOfTwo { rows, cols })
    }
}

/// In-place unitary 2-D transform of a row-major buffer.
pub fn fft2_in_place(
    data: &mut [Complex64],
    rows: usize,
    cols: usize,
    inverse: bool,
) -> Result<(), TensorError> {
    check_dims(rows, cols)?;
    if data.len() != rows * cols {
        return Err(TensorError::Length {
            rows,
            cols,
            len: data.len(),
        });
    }
    let row_tw = Twiddles::new(cols);
    for row in data.chunks_exact_mut(cols) {
        fft_1d(row, &row_tw, inverse);
    }
    let col_tw = Twiddles::new(rows);
    let mut scratch = vec![Complex64::new(0.0, 0.0); rows];
    for c in 0..cols {
        for r in 0..rows {
            scratch[r] = data[r * cols + c];
        }
        fft_1d(&mut scratch, &col_tw, inverse);
        for r in 0..rows {
            data[r * cols + c] = scratch[r];
        }
    }
    let scale = 1.0 / ((rows * cols) as f64).sqrt();
    for v in data.iter_mut() {
        *v *= scale;
    }
    Ok(())
}

/// Unitary forward 2-D DFT.
pub fn fft2(x: &ComplexTensor2) -> Result<ComplexTensor2, TensorError> {
    let mut out = x.clone();
    fft2_in_place(out.data_mut(), x.rows(), x.cols(), false)?;
    Ok(out)
}

/// Unitary forward 2-D DFT of a real image.
pub fn fft2_real(x: &RealTensor2) -> Result<ComplexTensor2, TensorError> {
    fft2(&x.to_complex())
}

/// Unitary inverse 2-D DFT; exact inverse and adjoint of [`fft2`].
pub fn ifft2(k: &ComplexTensor2) -> Result<ComplexTensor2, TensorError> {
    let mut out = k.clone();
    fft2_in_place(out.data_mut(), k.rows(), k.cols(), true)?;
    Ok(out)
}
