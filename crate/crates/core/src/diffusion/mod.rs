//! Variance-exploding score prior and the conditional predictor-corrector
//! sampler with closed-form k-space data consistency.

pub mod learned;

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::fft::{fft2, fft2_real, ifft2};
use crate::mri::SamplingMask;
use crate::recon::{ReconError, Reconstructor};
use crate::tensor::{gaussian_real, ComplexTensor2, RealTensor2, RngStream};

pub use learned::{train_score, LearnedScore};

/// Geometric noise levels `sigma(i) = sigma_min (sigma_max / sigma_min)^(i / (n - 1))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub n_scales: usize,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            sigma_min: 0.01,
            sigma_max: 10.0,
            n_scales: 1000,
        }
    }
}

impl NoiseSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64, n_scales: usize) -> Result<Self, ReconError> {
        let s = Self {
            sigma_min,
            sigma_max,
            n_scales,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ReconError> {
        if !(self.sigma_min > 0.0 && self.sigma_max > self.sigma_min && self.sigma_max.is_finite())
        {
            return Err(ReconError::Config(format!(
                "noise schedule needs 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if self.n_scales < 2 {
            return Err(ReconError::Config(
                "noise schedule needs at least 2 scales".into(),
            ));
        }
        Ok(())
    }

    pub fn sigma(&self, i: usize) -> f64 {
        if i == 0 {
            return self.sigma_min;
        }
        if i + 1 == self.n_scales {
            return self.sigma_max;
        }
        let t = i as f64 / (self.n_scales - 1) as f64;
        self.sigma_min * (self.sigma_max / self.sigma_min).powf(t)
    }

    pub fn sigmas(&self) -> Vec<f64> {
        (0..self.n_scales).map(|i| self.sigma(i)).collect()
    }
}

/// Score of the prior smoothed by `N(0, sigma^2 I)`. Must be a pure function.
pub trait Score: Send + Sync {
    fn kind(&self) -> &'static str;

    fn score(&self, x: &RealTensor2, sigma: f64) -> Result<RealTensor2, ReconError>;
}

/// Mixture of isotropic Gaussians `sum_k w_k N(mu_k, tau^2 I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    means: Vec<RealTensor2>,
    weights: Vec<f64>,
    variance: f64,
}

impl GaussianMixture {
    pub fn new(
        means: Vec<RealTensor2>,
        weights: Vec<f64>,
        variance: f64,
    ) -> Result<Self, ReconError> {
        if means.is_empty() || means.len() != weights.len() {
            return Err(ReconError::Config(format!(
                "mixture needs matching means and weights, got {} and {}",
                means.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|&w| !(w > 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(ReconError::Config(
                "mixture weights must be positive and sum to 1".into(),
            ));
        }
        if !(variance > 0.0) {
            return Err(ReconError::Config("mixture variance must be > 0".into()));
        }
        let shape = means[0].shape();
        if means.iter().any(|m| m.shape() != shape) {
            return Err(ReconError::Config("mixture means differ in shape".into()));
        }
        Ok(Self {
            means,
            weights,
            variance,
        })
    }

    pub fn single(mean: RealTensor2, variance: f64) -> Result<Self, ReconError> {
        Self::new(vec![mean], vec![1.0], variance)
    }

    pub fn means(&self) -> &[RealTensor2] {
        &self.means
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    /// Per-component `log w_k - ||x - mu_k||^2 / (2 v)` with `v = tau^2 + sigma^2`.
    fn log_terms(&self, x: &RealTensor2, sigma: f64) -> Result<Vec<f64>, ReconError> {
        let v = self.variance + sigma * sigma;
        self.means
            .iter()
            .zip(&self.weights)
            .map(|(m, w)| {
                let d = x.sub(m)?;
                Ok(w.ln() - d.dot(&d)? / (2.0 * v))
            })
            .collect()
    }

    /// `log p_sigma(x)`, evaluated with log-sum-exp.
    pub fn log_density(&self, x: &RealTensor2, sigma: f64) -> Result<f64, ReconError> {
        let terms = self.log_terms(x, sigma)?;
        let top = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln();
        let v = self.variance + sigma * sigma;
        let n = x.len() as f64;
        Ok(lse - 0.5 * n * (2.0 * std::f64::consts::PI * v).ln())
    }

    /// Draws one image from the (unsmoothed) mixture.
    pub fn sample(&self, rng: &mut RngStream) -> RealTensor2 {
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let (rows, cols) = self.means[k].shape();
        let z = gaussian_real(rng, rows, cols);
        self.means[k]
            .zip_map(&z, |m, e| m + self.variance.sqrt() * e)
            .expect("same shape")
    }
}

impl Score for GaussianMixture {
    fn kind(&self) -> &'static str {
        "analytic_gmm"
    }

    fn score(&self, x: &RealTensor2, sigma: f64) -> Result<RealTensor2, ReconError> {
        let terms = self.log_terms(x, sigma)?;
        let top = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let resp: Vec<f64> = terms.iter().map(|t| (t - top).exp()).collect();
        let total: f64 = resp.iter().sum();
        let v = self.variance + sigma * sigma;
        let mut out = RealTensor2::zeros(x.rows(), x.cols());
        for (m, r) in self.means.iter().zip(&resp) {
            let c = r / total / v;
            for ((o, mi), xi) in out.data_mut().iter_mut().zip(m.data()).zip(x.data()) {
                *o += c * (mi - xi);
            }
        }
        Ok(out)
    }
}

/// Blends measured entries: `lambda * y + (1 - lambda) * k` where the mask
/// is set, `k` untouched elsewhere.
pub fn dc_kspace(
    k_hat: &ComplexTensor2,
    y_t: &ComplexTensor2,
    mask: &SamplingMask,
    lambda: f64,
) -> Result<ComplexTensor2, ReconError> {
    check_lambda(lambda)?;
    mask.check(k_hat.shape())?;
    mask.check(y_t.shape())?;
    let cols = k_hat.cols();
    let mut out = k_hat.clone();
    for (row, (o, y)) in out
        .data_mut()
        .chunks_exact_mut(cols)
        .zip(y_t.data().chunks_exact(cols))
        .enumerate()
    {
        if !mask.is_selected(row) {
            continue;
        }
        if lambda == 1.0 {
            o.copy_from_slice(y);
        } else {
            for (oi, yi) in o.iter_mut().zip(y) {
                *oi = yi * lambda + *oi * (1.0 - lambda);
            }
        }
    }
    Ok(out)
}

fn check_lambda(lambda: f64) -> Result<(), ReconError> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(ReconError::Config(format!(
            "dc_lambda must lie in [0, 1], got {lambda}"
        )))
    }
}

/// `F^{-1}[lambda M y + (1 - lambda) M F x + (I - M) F x]`. The result is
/// complex; its k-space equals `y_t` on measured rows when `lambda = 1`.
pub fn data_consistency(
    x_hat: &ComplexTensor2,
    y_t: &ComplexTensor2,
    mask: &SamplingMask,
    lambda: f64,
) -> Result<ComplexTensor2, ReconError> {
    check_lambda(lambda)?;
    mask.check(x_hat.shape())?;
    if lambda == 0.0 {
        return Ok(x_hat.clone());
    }
    let k = fft2(x_hat)?;
    Ok(ifft2(&dc_kspace(&k, y_t, mask, lambda)?)?)
}

/// Position of the data-consistency step within one noise level.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepOrder {
    #[default]
    DcPredictorCorrector,
    PredictorCorrectorDc,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub snr_eta: f64,
    pub dc_lambda: f64,
    pub corrector_steps: usize,
    pub seed: u64,
    /// Add `sigma_i`-scaled masked noise to `y` before each consistency step.
    pub noisy_measurements: bool,
    pub order: StepOrder,
    /// Apply one last consistency step against the clean `y`.
    pub final_dc: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            snr_eta: 0.517,
            dc_lambda: 1.0,
            corrector_steps: 1,
            seed: 0,
            noisy_measurements: true,
            order: StepOrder::default(),
            final_dc: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), ReconError> {
        if !(self.snr_eta > 0.0) || !self.snr_eta.is_finite() {
            return Err(ReconError::Config(format!(
                "snr_eta must be > 0, got {}",
                self.snr_eta
            )));
        }
        check_lambda(self.dc_lambda)
    }

    pub fn score_evaluations(&self, schedule: &NoiseSchedule) -> usize {
        schedule.n_scales * (1 + self.corrector_steps)
    }
}

/// One row of the optional per-level sampler trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub level: usize,
    pub sigma: f64,
    pub score_norm: f64,
    pub x_norm: f64,
    pub predictor_variance: f64,
    pub corrector_step: f64,
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub image: RealTensor2,
    pub score_evaluations: usize,
    pub trace: Vec<TraceRow>,
}

pub fn write_trace_csv(path: impl AsRef<Path>, trace: &[TraceRow]) -> std::io::Result<()> {
    write_trace(std::fs::File::create(path)?, trace)
}

fn measurement_at(
    y: &ComplexTensor2,
    mask: &SamplingMask,
    sigma: f64,
    noisy: bool,
    rng: &mut RngStream,
) -> Result<ComplexTensor2, ReconError> {
    if !noisy {
        return Ok(y.clone());
    }
    let (rows, cols) = y.shape();
    let noise = mask.apply(&fft2_real(&gaussian_real(rng, rows, cols))?)?;
    Ok(y.zip_map(&noise, |a, b| a + b * sigma)?)
}

/// Conditional predictor-corrector sampling from `x ~ N(0, sigma_max^2 I)`
/// down to `sigma_min`. Levels run from `n_scales - 1` to 0; at each level
/// the consistency step, a reverse-diffusion predictor and
/// `corrector_steps` Langevin corrector steps are applied.
pub fn pc_sample(
    score: &dyn Score,
    ksp: &ComplexTensor2,
    mask: &SamplingMask,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    trace: bool,
) -> Result<SampleOutput, ReconError> {
    schedule.validate()?;
    cfg.validate()?;
    mask.check(ksp.shape())?;
    if mask.num_lines() == 0 {
        return Err(ReconError::Config("sampling mask selects no lines".into()));
    }
    let (rows, cols) = ksp.shape();
    let y = mask.apply(ksp)?;
    let mut rng = RngStream::new(cfg.seed);
    let mut x = gaussian_real(&mut rng, rows, cols).scale(schedule.sigma_max);
    let mut evals = 0;
    let mut rows_out = Vec::new();

    let dc =
        |x: &RealTensor2, sigma: f64, rng: &mut RngStream| -> Result<RealTensor2, ReconError> {
            let y_t = measurement_at(&y, mask, sigma, cfg.noisy_measurements, rng)?;
            Ok(data_consistency(&x.to_complex(), &y_t, mask, cfg.dc_lambda)?.real())
        };

    for i in (0..schedule.n_scales).rev() {
        let sigma = schedule.sigma(i);
        let sigma_prev = if i == 0 { 0.0 } else { schedule.sigma(i - 1) };
        if cfg.order == StepOrder::DcPredictorCorrector {
            x = dc(&x, sigma, &mut rng)?;
        }

        let s = score.score(&x, sigma)?;
        evals += 1;
        let var = sigma * sigma - sigma_prev * sigma_prev;
        let z = gaussian_real(&mut rng, rows, cols);
        let sd = var.sqrt();
        x = x
            .zip_map(&s, |xi, si| xi + var * si)?
            .zip_map(&z, |xi, zi| xi + sd * zi)?;
        let mut score_norm = s.l2_norm();

        let mut step = 0.0;
        for _ in 0..cfg.corrector_steps {
            let s = score.score(&x, sigma)?;
            evals += 1;
            let z = gaussian_real(&mut rng, rows, cols);
            let sn = s.l2_norm();
            step = if sn > 0.0 {
                let r = cfg.snr_eta * z.l2_norm() / sn;
                2.0 * r * r
            } else {
                0.0
            };
            let noise = (2.0 * step).sqrt();
            x = x
                .zip_map(&s, |xi, si| xi + step * si)?
                .zip_map(&z, |xi, zi| xi + noise * zi)?;
            score_norm = sn;
        }

        if cfg.order == StepOrder::PredictorCorrectorDc {
            x = dc(&x, sigma, &mut rng)?;
        }
        if !x.is_finite() {
            return Err(ReconError::Diverged {
                stage: "sampler",
                step: i,
            });
        }
        if trace {
            rows_out.push(TraceRow {
                level: i,
                sigma,
                score_norm,
                x_norm: x.l2_norm(),
                predictor_variance: var,
                corrector_step: step,
            });
        }
    }
    if cfg.final_dc {
        x = data_consistency(&x.to_complex(), &y, mask, cfg.dc_lambda)?.real();
    }
    Ok(SampleOutput {
        image: x,
        score_evaluations: evals,
        trace: rows_out,
    })
}

/// The sampler as a reconstructor, always run with `config.seed`.
#[derive(Clone)]
pub struct DiffusionRecon {
    pub score: Arc<dyn Score>,
    pub schedule: NoiseSchedule,
    pub config: SamplerConfig,
}

impl DiffusionRecon {
    pub fn new(score: Arc<dyn Score>, schedule: NoiseSchedule, config: SamplerConfig) -> Self {
        Self {
            score,
            schedule,
            config,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut out = self.clone();
        out.config.seed = seed;
        out
    }
}

impl Reconstructor for DiffusionRecon {
    fn name(&self) -> String {
        "diffusion".into()
    }

    fn reconstruct(
        &self,
        ksp: &ComplexTensor2,
        mask: &SamplingMask,
    ) -> Result<RealTensor2, ReconError> {
        Ok(pc_sample(
            self.score.as_ref(),
            ksp,
            mask,
            &self.schedule,
            &self.config,
            false,
        )?
        .image)
    }
}

/// Writes the trace as CSV to any writer.
pub fn write_trace<W: Write>(out: W, trace: &[TraceRow]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in trace {
        w.serialize(row)?;
    }
    w.flush()
}
