//! Supervised training of reconstructors with the joint image + k-space
//! fidelity loss, and the minibatch Adam loop shared with score training.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Tape, Tensor, Var};
use crate::mri::{forward, make_cartesian_mask, NoiseModel};
use crate::tensor::{RealTensor2, RngStream};

use super::{mask_weights, ReconError, Trainable};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the image-domain term.
    pub lambda_fid: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_fid: 1.0,
            lr: 3e-3,
            batch_size: 8,
            epochs: 30,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ReconError> {
        if !(self.lambda_fid >= 0.0) || !self.lambda_fid.is_finite() {
            return Err(ReconError::Config(format!(
                "lambda_fid must be >= 0, got {}",
                self.lambda_fid
            )));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(ReconError::Config(format!(
                "lr must be > 0, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(ReconError::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Acquisition drawn afresh for every training example.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskDistribution {
    pub acceleration: f64,
    pub center_fraction: f64,
    #[serde(default)]
    pub noise: NoiseModel,
}

impl Default for MaskDistribution {
    fn default() -> Self {
        Self {
            acceleration: 8.0,
            center_fraction: 0.04,
            noise: NoiseModel::noiseless(),
        }
    }
}

/// Per-example loss, split into its two terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    /// Unweighted image-domain MSE.
    pub image: f64,
    /// K-space fidelity MSE over measured entries.
    pub fidelity: f64,
}

impl LossParts {
    fn accumulate(&mut self, other: &LossParts) {
        self.total += other.total;
        self.image += other.image;
        self.fidelity += other.fidelity;
    }

    fn scaled(self, s: f64) -> Self {
        Self {
            total: self.total * s,
            image: self.image * s,
            fidelity: self.fidelity * s,
        }
    }
}

/// Mean losses of one epoch, measured on each batch before its update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: LossParts,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub steps: usize,
    pub param_count: usize,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.loss.total)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss.total)
    }
}

/// Minibatch Adam over `n_items` examples. `item` returns the loss and the
/// parameter gradients of one example; it receives its own random stream,
/// forked in a fixed order, so results do not depend on thread scheduling.
/// Batch gradients are summed in item order and averaged.
pub(crate) fn fit<F>(
    params: &mut Vec<Tensor>,
    n_items: usize,
    cfg: &TrainConfig,
    stage: &'static str,
    item: F,
) -> Result<TrainReport, ReconError>
where
    F: Fn(&[Tensor], usize, RngStream) -> Result<(LossParts, Vec<Tensor>), ReconError> + Sync,
{
    cfg.validate()?;
    if n_items == 0 {
        return Err(ReconError::Config("training set is empty".into()));
    }
    let mut rng = RngStream::new(cfg.seed);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), params);
    let mut report = TrainReport {
        param_count: params.iter().map(Tensor::len).sum(),
        ..TrainReport::default()
    };
    let mut forks = 0u64;
    let mut order: Vec<usize> = (0..n_items).collect();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut sum = LossParts::default();
        for batch in order.chunks(cfg.batch_size) {
            let jobs: Vec<(usize, RngStream)> = batch
                .iter()
                .map(|&i| {
                    forks += 1;
                    (i, rng.fork(forks))
                })
                .collect();
            let snapshot: &[Tensor] = params;
            let results: Vec<_> = jobs
                .into_par_iter()
                .map(|(i, stream)| item(snapshot, i, stream))
                .collect::<Result<_, _>>()?;
            let mut grads: Vec<Tensor> = params
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect();
            for (loss, g) in &results {
                if !loss.total.is_finite()
                    || g.iter().any(|t| t.data().iter().any(|v| !v.is_finite()))
                {
                    return Err(ReconError::Diverged {
                        stage,
                        step: report.steps,
                    });
                }
                sum.accumulate(loss);
                for (acc, gi) in grads.iter_mut().zip(g) {
                    for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                        *a += b;
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for g in &mut grads {
                for v in g.data_mut() {
                    *v *= inv;
                }
            }
            adam.step(params, &grads)?;
            report.steps += 1;
        }
        report.epochs.push(EpochStats {
            epoch,
            loss: sum.scaled(1.0 / n_items as f64),
        });
    }
    Ok(report)
}

/// Loss and parameter gradients for one ground-truth image.
pub fn supervised_item<R: Trainable>(
    model: &R,
    params: &[Tensor],
    gt: &RealTensor2,
    masks: &MaskDistribution,
    lambda_fid: f64,
    rng: &mut RngStream,
) -> Result<(LossParts, Vec<Tensor>), ReconError> {
    let mask = make_cartesian_mask(gt.rows(), masks.acceleration, masks.center_fraction, rng)?;
    let meas = forward(gt, &mask, masks.noise, rng)?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let ksp = tape.constant(Tensor::from_complex(&meas.ksp));
    let out = model.record_with(&mut tape, &vars, ksp, &mask)?;
    let target = tape.constant(Tensor::from_real(gt));
    let image = tape.mse(out, target)?;
    let oc = tape.complexify(out)?;
    let k = tape.fft2(oc)?;
    let k = tape.mask_mul(k, mask_weights(&mask))?;
    let fid_full = tape.mse(k, ksp)?;
    // mean over measured entries only
    let fidelity = tape.scale(fid_full, gt.len() as f64 / mask.num_measured() as f64);
    let weighted = tape.scale(image, lambda_fid);
    let loss = tape.add(weighted, fidelity)?;
    tape.backward(loss)?;
    let parts = LossParts {
        total: tape.value(loss).item(),
        image: tape.value(image).item(),
        fidelity: tape.value(fidelity).item(),
    };
    let grads = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .cloned()
                .expect("param leaves receive gradients")
        })
        .collect();
    Ok((parts, grads))
}

/// Fits `model` to `data` with Adam; returns the trained model and its loss
/// history.
pub fn train_supervised<R: Trainable>(
    model: &R,
    data: &[RealTensor2],
    masks: &MaskDistribution,
    cfg: &TrainConfig,
) -> Result<(R, TrainReport), ReconError> {
    let mut params = model.params();
    let report = fit(&mut params, data.len(), cfg, "training", |p, i, mut rng| {
        supervised_item(model, p, &data[i], masks, cfg.lambda_fid, &mut rng)
    })?;
    let mut trained = model.clone();
    trained.set_params(params)?;
    Ok((trained, report))
}
