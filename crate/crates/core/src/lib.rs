//! Desk-scale testbed for undersampled Cartesian MRI reconstruction and its
//! worst-case stability under k-space perturbations.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`fft`], [`io`]: dense tensors, unitary FFT, seeded random
//!   streams and the TNSR file format.
//! - [`mri`]: line masks and the acquisition operator `A = Λ F` with its
//!   adjoint.
//! - [`phantom`]: synthetic ground-truth images and datasets.
//! - [`autodiff`]: tape-based reverse-mode differentiation and Adam.
//! - [`recon`]: zero-filled, conjugate-gradient, learned denoiser and
//!   unrolled reconstructors.
//! - [`diffusion`]: VE score models and the conditional predictor-corrector
//!   sampler with k-space data consistency.
//! - [`attack`]: Adam-driven projected ascent on k-space perturbations and
//!   transfer evaluation.
//! - [`metrics`]: SSIM, pSNR and error maps.

pub mod attack;
pub mod autodiff;
pub mod diffusion;
pub mod fft;
pub mod io;
pub mod metrics;
pub mod mri;
pub mod phantom;
pub mod recon;
pub mod tensor;
