//! Raw numeric kernels shared by the tape and the tape-free inference path.

use num_complex::Complex64;

use crate::fft::fft2_in_place;
use crate::tensor::TensorError;

/// `c = a * b + beta * c` for row/column-strided operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover every index reached by the given strides
    // (checked above for the dense layouts used in this module).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds a `[cin, h, w]` map into `[cin * k * k, h * w]` patches with zero
/// "same" padding.
pub fn im2col(input: &[f64], cin: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let hw = h * w;
    let pad = k / 2;
    let mut col = vec![0.0; cin * k * k * hw];
    for ci in 0..cin {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let x_lo = pad.saturating_sub(kx);
                let x_hi = (w + pad).saturating_sub(kx).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h {
                        continue;
                    }
                    let sy = sy - pad;
                    let sx_lo = x_lo + kx - pad;
                    let n = x_hi - x_lo;
                    dst[y * w + x_lo..y * w + x_hi]
                        .copy_from_slice(&plane[sy * w + sx_lo..sy * w + sx_lo + n]);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: folds patch gradients back onto the input map.
pub fn col2im(col: &[f64], cin: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let hw = h * w;
    let pad = k / 2;
    let mut out = vec![0.0; cin * hw];
    for ci in 0..cin {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let x_lo = pad.saturating_sub(kx);
                let x_hi = (w + pad).saturating_sub(kx).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h {
                        continue;
                    }
                    let sy = sy - pad;
                    let sx_lo = x_lo + kx - pad;
                    let n = x_hi - x_lo;
                    let dst = &mut plane[sy * w + sx_lo..sy * w + sx_lo + n];
                    for (d, s) in dst.iter_mut().zip(&src[y * w + x_lo..y * w + x_hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
    out
}

/// Geometry of a stride-1 same-padded convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvShape {
    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }
}

pub fn conv2d_forward(s: ConvShape, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let hw = s.h * s.w;
    let col = im2col(input, s.cin, s.h, s.w, s.k);
    let mut out = vec![0.0; s.cout * hw];
    for (co, plane) in out.chunks_exact_mut(hw).enumerate() {
        plane.fill(bias[co]);
    }
    let kk = s.patch();
    gemm(
        s.cout,
        kk,
        hw,
        weight,
        (kk as isize, 1),
        &col,
        (hw as isize, 1),
        1.0,
        &mut out,
    );
    out
}

/// Gradients of a convolution. Returns `(d_input, d_weight, d_bias)`, each
/// only when requested.
pub fn conv2d_backward(
    s: ConvShape,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    need_input: bool,
    need_params: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let hw = s.h * s.w;
    let kk = s.patch();
    let d_input = need_input.then(|| {
        let mut dcol = vec![0.0; kk * hw];
        gemm(
            kk,
            s.cout,
            hw,
            weight,
            (1, kk as isize),
            grad_out,
            (hw as isize, 1),
            0.0,
            &mut dcol,
        );
        col2im(&dcol, s.cin, s.h, s.w, s.k)
    });
    let (d_weight, d_bias) = if need_params {
        let col = im2col(input, s.cin, s.h, s.w, s.k);
        let mut dw = vec![0.0; s.cout * kk];
        gemm(
            s.cout,
            hw,
            kk,
            grad_out,
            (hw as isize, 1),
            &col,
            (1, hw as isize),
            0.0,
            &mut dw,
        );
        let db = grad_out.chunks_exact(hw).map(|p| p.iter().sum()).collect();
        (Some(dw), Some(db))
    } else {
        (None, None)
    };
    (d_input, d_weight, d_bias)
}

pub fn leaky_relu(x: &[f64], slope: f64) -> Vec<f64> {
    x.iter()
        .map(|&v| if v > 0.0 { v } else { slope * v })
        .collect()
}

/// Unitary FFT of a planar `[2, h, w]` (re, im) buffer.
pub fn planar_fft2(
    data: &[f64],
    h: usize,
    w: usize,
    inverse: bool,
) -> Result<Vec<f64>, TensorError> {
    let hw = h * w;
    let mut buf: Vec<Complex64> = (0..hw)
        .map(|i| Complex64::new(data[i], data[hw + i]))
        .collect();
    fft2_in_place(&mut buf, h, w, inverse)?;
    let mut out = vec![0.0; 2 * hw];
    for (i, v) in buf.iter().enumerate() {
        out[i] = v.re;
        out[hw + i] = v.im;
    }
    Ok(out)
}
