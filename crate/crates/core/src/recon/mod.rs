//! Reconstruction methods behind a common interface, plus the differentiable
//! recording used by training and the attack.

pub mod net;
pub mod train;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::fft::{fft2_real, ifft2};
use crate::io::TnsrError;
use crate::mri::{apply_adjoint, apply_forward, MriError, SamplingMask};
use crate::tensor::{ComplexTensor2, RealTensor2, TensorError};

pub use net::{load_checkpoint, save_checkpoint, DenoiserNet, NetArch};

#[derive(Debug, Error)]
pub enum ReconError {
    #[error(transparent)]
    Mri(#[from] MriError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] TnsrError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{stage} produced a non-finite value at step {step}")]
    Diverged { stage: &'static str, step: usize },
}

/// Maps (possibly unmasked) k-space and a mask to a real image. Entries
/// outside the mask are ignored.
pub trait Reconstructor: Send + Sync {
    fn name(&self) -> String;

    fn reconstruct(
        &self,
        ksp: &ComplexTensor2,
        mask: &SamplingMask,
    ) -> Result<RealTensor2, ReconError>;

    /// Present for methods that can be recorded on a tape.
    fn as_differentiable(&self) -> Option<&dyn Differentiable> {
        None
    }
}

/// A reconstructor whose forward pass can be recorded, with `ksp` a
/// `[2, h, w]` planar complex node. Parameters enter as constants.
pub trait Differentiable: Reconstructor {
    fn record(&self, tape: &mut Tape, ksp: Var, mask: &SamplingMask) -> Result<Var, ReconError>;
}

/// A differentiable model with trainable parameters.
pub trait Trainable: Differentiable + Clone {
    fn params(&self) -> Vec<Tensor>;
    fn set_params(&mut self, params: Vec<Tensor>) -> Result<(), ReconError>;
    /// Like [`Differentiable::record`] but with caller-bound parameter leaves
    /// in the order of [`Trainable::params`].
    fn record_with(
        &self,
        tape: &mut Tape,
        params: &[Var],
        ksp: Var,
        mask: &SamplingMask,
    ) -> Result<Var, ReconError>;
}

pub(crate) fn mask_weights(mask: &SamplingMask) -> Arc<[f64]> {
    mask.weights().into()
}

/// `Re F^{-1}(M k)` on the tape.
pub fn record_zero_filled(
    tape: &mut Tape,
    ksp: Var,
    mask: &SamplingMask,
) -> Result<Var, AutodiffError> {
    let y = tape.mask_mul(ksp, mask_weights(mask))?;
    let img = tape.ifft2(y)?;
    tape.real_part(img)
}

/// `Re F^{-1}(M k)`.
pub fn zero_filled(ksp: &ComplexTensor2, mask: &SamplingMask) -> Result<RealTensor2, ReconError> {
    mask.check(ksp.shape())?;
    Ok(apply_adjoint(ksp, mask)?)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroFilled;

impl Reconstructor for ZeroFilled {
    fn name(&self) -> String {
        "zero_filled".into()
    }

    fn reconstruct(
        &self,
        ksp: &ComplexTensor2,
        mask: &SamplingMask,
    ) -> Result<RealTensor2, ReconError> {
        zero_filled(ksp, mask)
    }

    fn as_differentiable(&self) -> Option<&dyn Differentiable> {
        Some(self)
    }
}

impl Differentiable for ZeroFilled {
    fn record(&self, tape: &mut Tape, ksp: Var, mask: &SamplingMask) -> Result<Var, ReconError> {
        Ok(record_zero_filled(tape, ksp, mask)?)
    }
}

/// Result of [`cg_least_squares`].
#[derive(Clone, Debug)]
pub struct LeastSquares {
    pub image: RealTensor2,
    /// `sqrt(||A x - y||^2 + lambda ||x||^2)` before the first and after
    /// every iteration. Non-increasing in exact arithmetic.
    pub residuals: Vec<f64>,
    pub iterations: usize,
}

/// Solves `min_x ||A x - y||^2 + lambda ||x||^2` over real images with CGLS,
/// starting from zero.
pub fn cg_least_squares(
    ksp: &ComplexTensor2,
    mask: &SamplingMask,
    lambda: f64,
    max_iters: usize,
    tol: f64,
) -> Result<LeastSquares, ReconError> {
    if !(lambda >= 0.0) {
        return Err(ReconError::Config(format!(
            "l2 weight must be >= 0, got {lambda}"
        )));
    }
    mask.check(ksp.shape())?;
    let (rows, cols) = ksp.shape();
    let y = mask.apply(ksp)?;
    let mut x = RealTensor2::zeros(rows, cols);
    let mut r = y.clone();
    let mut s = apply_adjoint(&r, mask)?;
    let mut p = s.clone();
    let mut gamma = s.dot(&s)?;
    let augmented = |r: &ComplexTensor2, x: &RealTensor2| {
        let rn = r.l2_norm();
        (rn * rn + lambda * x.dot(x).unwrap_or(0.0)).sqrt()
    };
    let mut residuals = vec![augmented(&r, &x)];
    let stop = tol * tol * gamma;
    let mut iterations = 0;
    while iterations < max_iters && gamma > stop && gamma > 0.0 {
        let q = apply_forward(&p, mask)?;
        let qn = q.l2_norm();
        let delta = qn * qn + lambda * p.dot(&p)?;
        if delta <= 0.0 {
            break;
        }
        let alpha = gamma / delta;
        x = x.add(&p.scale(alpha))?;
        r = r.sub(&q.scale(alpha))?;
        s = apply_adjoint(&r, mask)?.sub(&x.scale(lambda))?;
        let gamma_next = s.dot(&s)?;
        p = s.add(&p.scale(gamma_next / gamma))?;
        gamma = gamma_next;
        iterations += 1;
        residuals.push(augmented(&r, &x));
    }
    Ok(LeastSquares {
        image: x,
        residuals,
        iterations,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CgConfig {
    pub lambda: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for CgConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            max_iters: 50,
            tol: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct CgRecon {
    pub config: CgConfig,
}

impl Reconstructor for CgRecon {
    fn name(&self) -> String {
        "cg_least_squares".into()
    }

    fn reconstruct(
        &self,
        ksp: &ComplexTensor2,
        mask: &SamplingMask,
    ) -> Result<RealTensor2, ReconError> {
        let c = self.config;
        Ok(cg_least_squares(ksp, mask, c.lambda, c.max_iters, c.tol)?.image)
    }
}

/// Zero-filled input followed by a learned image-domain denoiser.
#[derive(Clone, Debug)]
pub struct DenoiserRecon {
    pub net: DenoiserNet,
}

impl DenoiserRecon {
    pub fn new(net: DenoiserNet) -> Self {
        Self { net }
    }
}

impl Reconstructor for DenoiserRecon {
    fn name(&self) -> String {
        "denoiser".into()
    }

    fn reconstruct(
        &self,
        ksp: &ComplexTensor2,
        mask: &SamplingMask,
    ) -> Result<RealTensor2, ReconError> {
        self.net.apply(&zero_filled(ksp, mask)?)
    }

    fn as_differentiable(&self) -> Option<&dyn Differentiable> {
        Some(self)
    }
}

impl Differentiable for DenoiserRecon {
    fn record(&self, tape: &mut Tape, ksp: Var, mask: &SamplingMask) -> Result<Var, ReconError> {
        let params = self.net.bind(tape, false);
        self.record_with(tape, &params, ksp, mask)
    }
}

impl Trainable for DenoiserRecon {
    fn params(&self) -> Vec<Tensor> {
        self.net.params().to_vec()
    }

    fn set_params(&mut self, params: Vec<Tensor>) -> Result<(), ReconError> {
        self.net.set_params(params)
    }

    fn record_with(
        &self,
        tape: &mut Tape,
        params: &[Var],
        ksp: Var,
        mask: &SamplingMask,
    ) -> Result<Var, ReconError> {
        let zf = record_zero_filled(tape, ksp, mask)?;
        Ok(self.net.record(tape, params, zf)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnrolledConfig {
    pub n_iters: usize,
    pub step_size: f64,
    pub shared_weights: bool,
}

impl Default for UnrolledConfig {
    fn default() -> Self {
        Self {
            n_iters: 8,
            step_size: 1.0,
            shared_weights: true,
        }
    }
}

/// Unrolled proximal gradient: `x <- net_i(x - step * A^H(A x - y))`,
/// started from the zero-filled image.
#[derive(Clone, Debug)]
pub struct UnrolledRecon {
    config: UnrolledConfig,
    nets: Vec<DenoiserNet>,
}

impl UnrolledRecon {
    /// `nets` holds one net when weights are shared, else one per iteration.
    pub fn new(config: UnrolledConfig, nets: Vec<DenoiserNet>) -> Result<Self, ReconError> {
        let expected = if config.shared_weights {
            1
        } else {
            config.n_iters
        };
        if nets.len() != expected {
            return Err(ReconError::Config(format!(
                "unrolled model needs {expected} nets, got {}",
                nets.len()
            )));
        }
        if !config.step_size.is_finite() {
            return Err(ReconError::Config("step size must be finite".into()));
        }
        Ok(Self { config, nets })
    }

    /// Builds fresh nets from `arch`, seeded from `rng`.
    pub fn init(
        config: UnrolledConfig,
        arch: NetArch,
        rng: &mut crate::tensor::RngStream,
    ) -> Result<Self, ReconError> {
        let count = if config.shared_weights {
            1
        } else {
            config.n_iters
        };
        let nets = (0..count)
            .map(|_| DenoiserNet::new(arch.clone(), rng))
            .collect::<Result<_, _>>()?;
        Self::new(config, nets)
    }

    pub fn config(&self) -> &UnrolledConfig {
        &self.config
    }

    pub fn nets(&self) -> &[DenoiserNet] {
        &self.nets
    }

    fn net_at(&self, i: usize) -> usize {
        if self.config.shared_weights {
            0
        } else {
            i
        }
    }

    /// Every iterate, starting with the zero-filled image.
    pub fn iterates(
        &self,
        ksp: &ComplexTensor2,
        mask: &SamplingMask,
    ) -> Result<Vec<RealTensor2>, ReconError> {
        let y = mask.apply(ksp)?;
        let mut x = zero_filled(ksp, mask)?;
        let mut out = Vec::with_capacity(self.config.n_iters + 1);
        out.push(x.clone());
        for i in 0..self.config.n_iters {
            let mut r = fft2_real(&x)?;
            for (row, chunk) in r.data_mut().chunks_exact_mut(x.cols()).enumerate() {
                if mask.is_selected(row) {
                    for (v, m) in chunk.iter_mut().zip(&y.data()[row * x.cols()..]) {
                        *v -= m;
                    }
                } else {
                    chunk.fill(num_complex::Complex64::new(0.0, 0.0));
                }
            }
            let grad = ifft2(&r)?.real();
            x = x.sub(&grad.scale(self.config.step_size))?;
            x = self.nets[self.net_at(i)].apply(&x)?;
            out.push(x.clone());
        }
        Ok(out)
    }
}

impl Reconstructor for UnrolledRecon {
    fn name(&self) -> String {
        "unrolled".into()
    }

    fn reconstruct(
        &self,
        ksp: &ComplexTensor2,
        mask: &SamplingMask,
    ) -> Result<RealTensor2, ReconError> {
        Ok(self
            .iterates(ksp, mask)?
            .pop()
            .expect("at least the initial iterate"))
    }

    fn as_differentiable(&self) -> Option<&dyn Differentiable> {
        Some(self)
    }
}

impl Differentiable for UnrolledRecon {
    fn record(&self, tape: &mut Tape, ksp: Var, mask: &SamplingMask) -> Result<Var, ReconError> {
        let params: Vec<Var> = self.nets.iter().flat_map(|n| n.bind(tape, false)).collect();
        self.record_with(tape, &params, ksp, mask)
    }
}

impl Trainable for UnrolledRecon {
    fn params(&self) -> Vec<Tensor> {
        self.nets
            .iter()
            .flat_map(|n| n.params().iter().cloned())
            .collect()
    }

    fn set_params(&mut self, params: Vec<Tensor>) -> Result<(), ReconError> {
        let per = self.nets[0].params().len();
        if params.len() != per * self.nets.len() {
            return Err(AutodiffError::Count {
                expected: per * self.nets.len(),
                got: params.len(),
            }
            .into());
        }
        let mut it = params.into_iter();
        for net in &mut self.nets {
            net.set_params(it.by_ref().take(per).collect())?;
        }
        Ok(())
    }

    fn record_with(
        &self,
        tape: &mut Tape,
        params: &[Var],
        ksp: Var,
        mask: &SamplingMask,
    ) -> Result<Var, ReconError> {
        let per = self.nets[0].params().len();
        let weights = mask_weights(mask);
        let y = tape.mask_mul(ksp, weights.clone())?;
        let img = tape.ifft2(y)?;
        let mut x = tape.real_part(img)?;
        for i in 0..self.config.n_iters {
            let xc = tape.complexify(x)?;
            let k = tape.fft2(xc)?;
            let k = tape.mask_mul(k, weights.clone())?;
            let r = tape.sub(k, y)?;
            let g = tape.ifft2(r)?;
            let g = tape.real_part(g)?;
            let g = tape.scale(g, self.config.step_size);
            let z = tape.sub(x, g)?;
            let n = self.net_at(i);
            x = self.nets[n].record(tape, &params[n * per..(n + 1) * per], z)?;
        }
        Ok(x)
    }
}
