//! Image quality metrics: SSIM, pSNR, degradation deltas and error maps.
//!
//! SSIM uses a 7x7 uniform window, `K1 = 0.01`, `K2 = 0.03`, unbiased
//! (sample) local covariances, and averages only over windows that fit
//! entirely inside the image. `data_range` is supplied by the caller;
//! [`data_range`] gives the convention used throughout the testbed
//! (`max(gt) - min(gt)`). Reconstructions are never clamped first.

use serde::Serialize;
use thiserror::Error;

use crate::tensor::{RealTensor2, TensorError};

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error(transparent)]
    Shape(#[from] TensorError),
    #[error("data range must be positive, got {0}")]
    DataRange(f64),
    #[error("image {0:?} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")]
    TooSmall((usize, usize)),
}

/// `max(gt) - min(gt)`.
pub fn data_range(gt: &RealTensor2) -> f64 {
    gt.max() - gt.min()
}

fn check(a: &RealTensor2, b: &RealTensor2, range: f64) -> Result<(), MetricError> {
    a.check_shape(b.shape())?;
    if !(range > 0.0) {
        return Err(MetricError::DataRange(range));
    }
    Ok(())
}

/// Per-row running sums over `win` columns, then over `win` rows.
fn box_sums(src: &[f64], rows: usize, cols: usize, win: usize) -> Vec<f64> {
    let out_cols = cols - win + 1;
    let out_rows = rows - win + 1;
    let mut horiz = vec![0.0; rows * out_cols];
    for r in 0..rows {
        let row = &src[r * cols..(r + 1) * cols];
        for c in 0..out_cols {
            horiz[r * out_cols + c] = row[c..c + win].iter().sum();
        }
    }
    let mut out = vec![0.0; out_rows * out_cols];
    for r in 0..out_rows {
        for c in 0..out_cols {
            out[r * out_cols + c] = (r..r + win).map(|rr| horiz[rr * out_cols + c]).sum();
        }
    }
    out
}

/// Mean structural similarity.
pub fn ssim(a: &RealTensor2, b: &RealTensor2, data_range: f64) -> Result<f64, MetricError> {
    check(a, b, data_range)?;
    let (rows, cols) = a.shape();
    let win = SSIM_WINDOW;
    if rows < win || cols < win {
        return Err(MetricError::TooSmall(a.shape()));
    }
    let n = (win * win) as f64;
    let cov_norm = n / (n - 1.0);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);

    let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect()
    };
    let sa = box_sums(a.data(), rows, cols, win);
    let sb = box_sums(b.data(), rows, cols, win);
    let saa = box_sums(&prod(|x, _| x * x), rows, cols, win);
    let sbb = box_sums(&prod(|_, y| y * y), rows, cols, win);
    let sab = box_sums(&prod(|x, y| x * y), rows, cols, win);

    let mut total = 0.0;
    for i in 0..sa.len() {
        let ua = sa[i] / n;
        let ub = sb[i] / n;
        let vaa = cov_norm * (saa[i] / n - ua * ua);
        let vbb = cov_norm * (sbb[i] / n - ub * ub);
        let vab = cov_norm * (sab[i] / n - ua * ub);
        let num = (2.0 * ua * ub + c1) * (2.0 * vab + c2);
        let den = (ua * ua + ub * ub + c1) * (vaa + vbb + c2);
        total += num / den;
    }
    Ok(total / sa.len() as f64)
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` when the images match.
pub fn psnr(a: &RealTensor2, b: &RealTensor2, data_range: f64) -> Result<f64, MetricError> {
    check(a, b, data_range)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

/// Difference of two pSNR values, treating equal (possibly infinite) values
/// as zero change.
pub fn psnr_drop(clean: f64, pert: f64) -> f64 {
    if clean == pert {
        0.0
    } else {
        clean - pert
    }
}

/// Quality drop caused by a perturbation, both measured against ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DeltaMetrics {
    pub delta_ssim: f64,
    pub delta_psnr: f64,
}

pub fn delta_metrics(
    gt: &RealTensor2,
    clean: &RealTensor2,
    pert: &RealTensor2,
    data_range: f64,
) -> Result<DeltaMetrics, MetricError> {
    let s_clean = ssim(gt, clean, data_range)?;
    let s_pert = ssim(gt, pert, data_range)?;
    let p_clean = psnr(gt, clean, data_range)?;
    let p_pert = psnr(gt, pert, data_range)?;
    Ok(DeltaMetrics {
        delta_ssim: s_clean - s_pert,
        delta_psnr: psnr_drop(p_clean, p_pert),
    })
}

/// Entrywise absolute error.
pub fn mae_map(gt: &RealTensor2, recon: &RealTensor2) -> Result<RealTensor2, MetricError> {
    Ok(gt.zip_map(recon, |a, b| (a - b).abs())?)
}

/// SSIM, pSNR and error map of one reconstruction.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub ssim: f64,
    pub psnr: f64,
    pub mae_map: RealTensor2,
    pub data_range: f64,
}

pub fn evaluate(gt: &RealTensor2, recon: &RealTensor2) -> Result<MetricReport, MetricError> {
    let range = data_range(gt);
    Ok(MetricReport {
        ssim: ssim(gt, recon, range)?,
        psnr: psnr(gt, recon, range)?,
        mae_map: mae_map(gt, recon)?,
        data_range: range,
    })
}

/// Normalized lag-1 spatial autocorrelation, averaged over the horizontal
/// and vertical directions. Near 0 for white noise, near 1 for smooth maps.
pub fn lag1_autocorrelation(map: &RealTensor2) -> f64 {
    let mean = map.mean();
    let (rows, cols) = map.shape();
    let centered = |r: usize, c: usize| map.get(r, c) - mean;
    let var: f64 = map.data().iter().map(|v| (v - mean) * (v - mean)).sum();
    if var == 0.0 {
        return 0.0;
    }
    let mut horiz = 0.0;
    for r in 0..rows {
        for c in 0..cols - 1 {
            horiz += centered(r, c) * centered(r, c + 1);
        }
    }
    let mut vert = 0.0;
    for r in 0..rows - 1 {
        for c in 0..cols {
            vert += centered(r, c) * centered(r + 1, c);
        }
    }
    let h = horiz / (rows * (cols - 1)) as f64;
    let v = vert / ((rows - 1) * cols) as f64;
    0.5 * (h + v) / (var / (rows * cols) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gaussian_real, RngStream};

    fn half_plane(n: usize) -> RealTensor2 {
        RealTensor2::from_fn(n, n, |_, c| if c < n / 2 { 0.0 } else { 1.0 })
    }

    #[test]
    fn ssim_identity_is_exactly_one() {
        let x = crate::phantom::shepp_logan(32).unwrap().image;
        assert_eq!(ssim(&x, &x, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn inverted_half_plane_is_negative() {
        let x = half_plane(16);
        let inv = x.map(|v| 1.0 - v);
        // Windows straddling the edge see perfectly anti-correlated content;
        // windows away from it see constant patches with opposite means.
        let s = ssim(&x, &inv, 1.0).unwrap();
        // hand evaluation of the window statistics (see below)
        let c1 = 1e-4;
        let c2 = 9e-4;
        let mut expected = 0.0;
        let mut count = 0.0;
        for start in 0..=(16 - 7) {
            let ones = (start..start + 7).filter(|&c| c >= 8).count() as f64 * 7.0;
            let ua = ones / 49.0;
            let ub = 1.0 - ua;
            let var = 49.0 / 48.0 * (ua - ua * ua);
            let cov = -var;
            let v = (2.0 * ua * ub + c1) * (2.0 * cov + c2)
                / ((ua * ua + ub * ub + c1) * (2.0 * var + c2));
            expected += v * 10.0; // 10 identical window rows
            count += 10.0;
        }
        expected /= count;
        assert!(s < 0.0, "{s}");
        assert!((s - expected).abs() < 1e-12, "{s} vs {expected}");
    }

    #[test]
    fn ssim_is_symmetric_and_bounded() {
        let mut rng = RngStream::new(1);
        let a = gaussian_real(&mut rng, 24, 24);
        let b = gaussian_real(&mut rng, 24, 24);
        let ab = ssim(&a, &b, 2.0).unwrap();
        let ba = ssim(&b, &a, 2.0).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn psnr_closed_forms() {
        let a = RealTensor2::zeros(4, 4);
        let b = RealTensor2::filled(4, 4, 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let shift = psnr(&a, &b, 2.0).unwrap() - psnr(&a, &b, 1.0).unwrap();
        assert!((shift - 20.0 * 2f64.log10()).abs() < 1e-9);
        assert!((shift - 6.0206).abs() < 1e-4);
    }

    #[test]
    fn psnr_falls_along_noise_ladder() {
        let gt = crate::phantom::shepp_logan(32).unwrap().image;
        let noise = gaussian_real(&mut RngStream::new(3), 32, 32);
        let mut last = f64::INFINITY;
        for std in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let noisy = gt.add(&noise.scale(std)).unwrap();
            let p = psnr(&gt, &noisy, 1.0).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn deltas() {
        let gt = crate::phantom::shepp_logan(32).unwrap().image;
        let noise = gaussian_real(&mut RngStream::new(4), 32, 32);
        let clean = gt.add(&noise.scale(0.02)).unwrap();
        let pert = clean.add(&noise.scale(0.05)).unwrap();
        let zero = delta_metrics(&gt, &clean, &clean, 1.0).unwrap();
        assert_eq!(zero.delta_ssim, 0.0);
        assert_eq!(zero.delta_psnr, 0.0);
        let d = delta_metrics(&gt, &clean, &pert, 1.0).unwrap();
        assert!(d.delta_ssim > 0.0 && d.delta_psnr > 0.0);
        let swapped = delta_metrics(&gt, &pert, &clean, 1.0).unwrap();
        assert_eq!(swapped.delta_ssim, -d.delta_ssim);
        assert_eq!(swapped.delta_psnr, -d.delta_psnr);
    }

    #[test]
    fn mae_maps() {
        let ones = RealTensor2::filled(5, 5, 1.0);
        let zeros = RealTensor2::zeros(5, 5);
        assert_eq!(mae_map(&ones, &ones).unwrap(), zeros);
        assert_eq!(mae_map(&ones, &zeros).unwrap(), ones);
        let mut rng = RngStream::new(5);
        let a = gaussian_real(&mut rng, 5, 5);
        let b = gaussian_real(&mut rng, 5, 5);
        let l1: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!((mae_map(&a, &b).unwrap().mean() - l1 / 25.0).abs() < 1e-14);
    }

    #[test]
    fn shape_and_range_errors() {
        let a = RealTensor2::zeros(8, 8);
        let b = RealTensor2::zeros(8, 16);
        assert!(matches!(ssim(&a, &b, 1.0), Err(MetricError::Shape(_))));
        assert!(matches!(psnr(&a, &a, 0.0), Err(MetricError::DataRange(_))));
        assert!(matches!(mae_map(&a, &b), Err(MetricError::Shape(_))));
    }

    #[test]
    fn autocorrelation_separates_noise_from_smooth() {
        let noise = gaussian_real(&mut RngStream::new(6), 64, 64);
        let smooth = RealTensor2::from_fn(64, 64, |r, c| {
            ((r as f64) / 10.0).sin() + (c as f64 / 13.0).cos()
        });
        assert!(lag1_autocorrelation(&noise).abs() < 0.1);
        assert!(lag1_autocorrelation(&smooth) > 0.9);
    }
}
