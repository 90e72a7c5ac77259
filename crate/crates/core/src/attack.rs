//! Worst-case k-space perturbations by Adam-driven projected ascent, random
//! baselines and white-box / transfer evaluation.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Adam, AdamConfig, Tape, Tensor};
use crate::metrics::{data_range, psnr, ssim, MetricError};
use crate::mri::SamplingMask;
use crate::recon::{Differentiable, ReconError, Reconstructor};
use crate::tensor::{derive_seed, gaussian_complex, ComplexTensor2, RealTensor2, RngStream};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("k-space is zero; the relative budget is undefined")]
    ZeroKspace,
    #[error("invalid attack configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Recon(#[from] ReconError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("target {target:?}, item {item}: {source}")]
    Target {
        target: String,
        item: usize,
        #[source]
        source: Box<AttackError>,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Adam step size for the perturbation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum LearningRate {
    Fixed(f64),
    /// `value * ||ksp|| / sqrt(m)` with `m` the number of measured entries.
    Relative(f64),
}

impl LearningRate {
    pub fn resolve(&self, ksp: &ComplexTensor2, mask: &SamplingMask) -> f64 {
        match *self {
            Self::Fixed(a) => a,
            Self::Relative(r) => r * ksp.l2_norm() / (mask.num_measured().max(1) as f64).sqrt(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// Relative budget: `||delta|| <= epsilon ||ksp||`.
    pub epsilon: f64,
    pub iters: usize,
    pub lr: LearningRate,
    pub init_scale_c: f64,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            iters: 200,
            lr: LearningRate::Relative(1e-3),
            init_scale_c: 1e4,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(AttackError::Config(format!(
                "epsilon must be >= 0, got {}",
                self.epsilon
            )));
        }
        if !(self.init_scale_c > 0.0) {
            return Err(AttackError::Config(format!(
                "init_scale_c must be > 0, got {}",
                self.init_scale_c
            )));
        }
        let lr = match self.lr {
            LearningRate::Fixed(a) | LearningRate::Relative(a) => a,
        };
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(AttackError::Config(format!("lr must be > 0, got {lr}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationResult {
    pub delta: ComplexTensor2,
    /// `-||x - x_hat||^2` before each update, then once more for the
    /// returned `delta`; length `iters + 1`.
    pub loss_history: Vec<f64>,
    pub final_rel_norm: f64,
}

impl PerturbationResult {
    pub fn final_loss(&self) -> f64 {
        *self.loss_history.last().expect("history is never empty")
    }
}

/// Complex Gaussian direction rescaled to `||ksp|| / c`.
pub fn init_delta(
    ksp: &ComplexTensor2,
    c: f64,
    rng: &mut RngStream,
) -> Result<ComplexTensor2, AttackError> {
    let kn = ksp.l2_norm();
    if kn == 0.0 {
        return Err(AttackError::ZeroKspace);
    }
    let g = gaussian_complex(rng, ksp.rows(), ksp.cols());
    Ok(g.scale(kn / (g.l2_norm() * c)))
}

/// Radial projection onto `||delta|| <= epsilon ||ksp||`.
pub fn project_delta(delta: &ComplexTensor2, ksp: &ComplexTensor2, epsilon: f64) -> ComplexTensor2 {
    let radius = epsilon * ksp.l2_norm();
    let dn = delta.l2_norm();
    if dn > radius {
        delta.scale(radius / dn)
    } else {
        delta.clone()
    }
}

/// Complex Gaussian direction scaled to exactly `epsilon ||ksp||`.
pub fn random_perturb(ksp: &ComplexTensor2, epsilon: f64, rng: &mut RngStream) -> ComplexTensor2 {
    let g = gaussian_complex(rng, ksp.rows(), ksp.cols());
    let gn = g.l2_norm();
    if epsilon == 0.0 || gn == 0.0 {
        return ComplexTensor2::zeros(ksp.rows(), ksp.cols());
    }
    g.scale(epsilon * ksp.l2_norm() / gn)
}

fn recon_distance(reference: &RealTensor2, other: &RealTensor2) -> Result<f64, AttackError> {
    let d = reference.sub(other).map_err(ReconError::from)?;
    Ok(d.dot(&d).map_err(ReconError::from)?)
}

/// Maximizes `||recon(ksp) - recon(ksp + delta)||^2` over the budget ball.
/// Each iteration records a fresh tape, takes an Adam step on the real and
/// imaginary parts of `delta`, then projects.
pub fn worst_case_perturb(
    recon: &dyn Differentiable,
    ksp: &ComplexTensor2,
    mask: &SamplingMask,
    cfg: &AttackConfig,
) -> Result<PerturbationResult, AttackError> {
    cfg.validate()?;
    mask.check(ksp.shape()).map_err(ReconError::from)?;
    let mut rng = RngStream::new(cfg.seed);
    let mut delta = init_delta(ksp, cfg.init_scale_c, &mut rng)?;
    let reference = recon.reconstruct(ksp, mask)?;
    let lr = cfg.lr.resolve(ksp, mask);
    let k_const = Tensor::from_complex(ksp);
    let ref_const = Tensor::from_real(&reference);
    let mut params = vec![Tensor::from_complex(&delta)];
    let mut adam = Adam::new(AdamConfig::with_lr(lr), &params);
    let mut history = Vec::with_capacity(cfg.iters + 1);
    for t in 0..cfg.iters {
        let mut tape = Tape::new();
        let d = tape.param(params[0].clone());
        let k = tape.constant(k_const.clone());
        let kp = tape.add(k, d).map_err(ReconError::from)?;
        let x_hat = recon.record(&mut tape, kp, mask)?;
        let x_ref = tape.constant(ref_const.clone());
        let diff = tape.sub(x_ref, x_hat).map_err(ReconError::from)?;
        let sq = tape.l2_squared(diff);
        let loss = tape.scale(sq, -1.0);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(ReconError::Diverged {
                stage: "attack",
                step: t,
            }
            .into());
        }
        history.push(value);
        tape.backward(loss).map_err(ReconError::from)?;
        let grad = tape.grad(d).cloned().expect("param leaf has a gradient");
        adam.step(&mut params, &[grad]).map_err(ReconError::from)?;
        delta = project_delta(
            &params[0].to_complex().map_err(ReconError::from)?,
            ksp,
            cfg.epsilon,
        );
        params[0] = Tensor::from_complex(&delta);
    }
    delta = project_delta(&delta, ksp, cfg.epsilon);
    let perturbed = ksp.add(&delta).map_err(ReconError::from)?;
    let last = -recon_distance(&reference, &recon.reconstruct(&perturbed, mask)?)?;
    if !last.is_finite() {
        return Err(ReconError::Diverged {
            stage: "attack",
            step: cfg.iters,
        }
        .into());
    }
    history.push(last);
    let final_rel_norm = delta.l2_norm() / ksp.l2_norm();
    Ok(PerturbationResult {
        delta,
        loss_history: history,
        final_rel_norm,
    })
}

/// One measurement of a transfer evaluation.
#[derive(Clone, Debug)]
pub struct TransferItem {
    pub index: usize,
    pub gt: RealTensor2,
    pub ksp: ComplexTensor2,
    pub mask: SamplingMask,
}

/// Reconstructions of one target on clean, adversarial and random inputs.
#[derive(Clone, Debug)]
pub struct TargetOutputs {
    pub target: String,
    pub clean: RealTensor2,
    pub adv: RealTensor2,
    pub rand: RealTensor2,
}

#[derive(Clone, Debug)]
pub struct ItemOutcome {
    pub index: usize,
    pub seed: u64,
    pub attack: PerturbationResult,
    pub random_delta: ComplexTensor2,
    pub targets: Vec<TargetOutputs>,
}

/// Seeds used for item `index`: `(attack seed, random-baseline seed)`.
pub fn item_seeds(base: u64, index: usize) -> (u64, u64) {
    let s = derive_seed(base, index as u64);
    (s, derive_seed(s, 0x7261_6e64))
}

/// Crafts `delta` on `source` and runs every target on the clean,
/// adversarial and equal-norm random inputs.
pub fn transfer_item(
    source: &dyn Differentiable,
    targets: &[(String, &dyn Reconstructor)],
    item: &TransferItem,
    cfg: &AttackConfig,
) -> Result<ItemOutcome, AttackError> {
    let (seed, rand_seed) = item_seeds(cfg.seed, item.index);
    let acfg = AttackConfig { seed, ..*cfg };
    let annotate = |target: &str, e: AttackError| AttackError::Target {
        target: target.to_string(),
        item: item.index,
        source: Box::new(e),
    };
    let attack = worst_case_perturb(source, &item.ksp, &item.mask, &acfg)
        .map_err(|e| annotate(&source.name(), e))?;
    let random_delta = random_perturb(&item.ksp, cfg.epsilon, &mut RngStream::new(rand_seed));
    let adv_ksp = item.ksp.add(&attack.delta).map_err(ReconError::from)?;
    let rand_ksp = item.ksp.add(&random_delta).map_err(ReconError::from)?;
    let mut outs = Vec::with_capacity(targets.len());
    for (name, recon) in targets {
        let run = |k: &ComplexTensor2| {
            recon
                .reconstruct(k, &item.mask)
                .map_err(|e| annotate(name, e.into()))
        };
        outs.push(TargetOutputs {
            target: name.clone(),
            clean: run(&item.ksp)?,
            adv: run(&adv_ksp)?,
            rand: run(&rand_ksp)?,
        });
    }
    Ok(ItemOutcome {
        index: item.index,
        seed,
        attack,
        random_delta,
        targets: outs,
    })
}

/// One CSV row: metrics against ground truth for one (target, item).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub source: String,
    pub target: String,
    pub epsilon: f64,
    pub item: usize,
    pub ssim_clean: f64,
    pub ssim_adv: f64,
    pub ssim_rand: f64,
    pub psnr_clean: f64,
    pub psnr_adv: f64,
    pub psnr_rand: f64,
    pub delta_rel_norm: f64,
    pub seed: u64,
}

impl TransferRow {
    pub fn delta_ssim_adv(&self) -> f64 {
        self.ssim_clean - self.ssim_adv
    }

    pub fn delta_ssim_rand(&self) -> f64 {
        self.ssim_clean - self.ssim_rand
    }

    pub fn delta_psnr_adv(&self) -> f64 {
        self.psnr_clean - self.psnr_adv
    }

    pub fn delta_psnr_rand(&self) -> f64 {
        self.psnr_clean - self.psnr_rand
    }
}

pub fn outcome_rows(
    source: &str,
    epsilon: f64,
    item: &TransferItem,
    outcome: &ItemOutcome,
) -> Result<Vec<TransferRow>, AttackError> {
    let l = data_range(&item.gt);
    outcome
        .targets
        .iter()
        .map(|t| {
            Ok(TransferRow {
                source: source.to_string(),
                target: t.target.clone(),
                epsilon,
                item: item.index,
                ssim_clean: ssim(&item.gt, &t.clean, l)?,
                ssim_adv: ssim(&item.gt, &t.adv, l)?,
                ssim_rand: ssim(&item.gt, &t.rand, l)?,
                psnr_clean: psnr(&item.gt, &t.clean, l)?,
                psnr_adv: psnr(&item.gt, &t.adv, l)?,
                psnr_rand: psnr(&item.gt, &t.rand, l)?,
                delta_rel_norm: outcome.attack.final_rel_norm,
                seed: outcome.seed,
            })
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TransferReport {
    pub rows: Vec<TransferRow>,
}

impl TransferReport {
    /// Rows ordered by (source, target, epsilon, item).
    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| {
            (&a.source, &a.target)
                .cmp(&(&b.source, &b.target))
                .then(a.epsilon.total_cmp(&b.epsilon))
                .then(a.item.cmp(&b.item))
        });
    }

    pub fn for_target<'a>(&'a self, target: &'a str) -> impl Iterator<Item = &'a TransferRow> + 'a {
        self.rows.iter().filter(move |r| r.target == target)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), AttackError> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, AttackError> {
        let mut r = csv::Reader::from_reader(input);
        let rows = r.deserialize().collect::<Result<_, _>>()?;
        Ok(Self { rows })
    }
}

/// Crafts a perturbation on `source` for every item and evaluates every
/// target on it. Items run in parallel; each owns its seeds, so the report
/// does not depend on scheduling.
pub fn transfer_evaluate(
    source: &dyn Differentiable,
    targets: &[(String, &dyn Reconstructor)],
    items: &[TransferItem],
    cfg: &AttackConfig,
) -> Result<TransferReport, AttackError> {
    cfg.validate()?;
    let name = source.name();
    let per_item: Vec<Vec<TransferRow>> = items
        .par_iter()
        .map(|item| {
            let outcome = transfer_item(source, targets, item, cfg)?;
            outcome_rows(&name, cfg.epsilon, item, &outcome)
        })
        .collect::<Result<_, _>>()?;
    let mut report = TransferReport {
        rows: per_item.into_iter().flatten().collect(),
    };
    report.sort();
    Ok(report)
}
