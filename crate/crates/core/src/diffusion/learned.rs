//! Score network trained by denoising score matching.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::recon::net::{load_checkpoint, save_checkpoint, DenoiserNet, NetArch};
use crate::recon::train::{fit, LossParts, TrainConfig, TrainReport};
use crate::recon::ReconError;
use crate::tensor::{gaussian_real, RealTensor2, RngStream};

use super::{NoiseSchedule, Score};

/// Typical per-pixel scale of the training images.
pub const SIGMA_DATA: f64 = 0.5;

/// `s(x, sigma) = net([c_in x, log(sigma) / 4]) / sigma` with
/// `c_in = 1 / sqrt(sigma^2 + sigma_data^2)`. The net predicts the negated
/// unit noise, so a zero-output net gives a zero score.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnedScore {
    net: DenoiserNet,
    sigma_data: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ScoreMeta {
    sigma_data: f64,
    #[serde(default)]
    extra: serde_json::Value,
}

impl LearnedScore {
    /// Architecture with a 2-channel input (image, noise level) and a plain
    /// (non-residual) output.
    pub fn arch(hidden: usize, depth: usize) -> NetArch {
        NetArch {
            in_channels: 2,
            out_channels: 1,
            hidden,
            depth,
            residual: false,
            ..NetArch::default()
        }
    }

    pub fn new(net: DenoiserNet) -> Result<Self, ReconError> {
        let a = net.arch();
        if a.in_channels != 2 || a.out_channels != 1 || a.residual {
            return Err(ReconError::Config(
                "score net needs 2 input channels, 1 output channel and no residual head".into(),
            ));
        }
        Ok(Self {
            net,
            sigma_data: SIGMA_DATA,
        })
    }

    pub fn init(hidden: usize, depth: usize, rng: &mut RngStream) -> Result<Self, ReconError> {
        Self::new(DenoiserNet::new(Self::arch(hidden, depth), rng)?)
    }

    pub fn net(&self) -> &DenoiserNet {
        &self.net
    }

    fn input(&self, x: &RealTensor2, sigma: f64) -> Tensor {
        let c_in = 1.0 / (sigma * sigma + self.sigma_data * self.sigma_data).sqrt();
        let level = sigma.ln() / 4.0;
        let mut data = Vec::with_capacity(2 * x.len());
        data.extend(x.data().iter().map(|v| c_in * v));
        data.extend(std::iter::repeat_n(level, x.len()));
        Tensor::new(vec![2, x.rows(), x.cols()], data).expect("finite input")
    }

    pub fn save(&self, dir: impl AsRef<Path>, extra: serde_json::Value) -> Result<(), ReconError> {
        let meta = ScoreMeta {
            sigma_data: self.sigma_data,
            extra,
        };
        save_checkpoint(
            dir,
            "score",
            std::slice::from_ref(&self.net),
            serde_json::to_value(meta).expect("meta serializes"),
        )
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, ReconError> {
        let (header, mut nets) = load_checkpoint(dir)?;
        if header.kind != "score" || nets.len() != 1 {
            return Err(ReconError::Checkpoint(format!(
                "expected a score checkpoint, found {:?} with {} nets",
                header.kind,
                nets.len()
            )));
        }
        let meta: ScoreMeta = serde_json::from_value(header.meta)
            .map_err(|e| ReconError::Checkpoint(e.to_string()))?;
        let mut out = Self::new(nets.remove(0))?;
        out.sigma_data = meta.sigma_data;
        Ok(out)
    }
}

impl Score for LearnedScore {
    fn kind(&self) -> &'static str {
        "learned"
    }

    fn score(&self, x: &RealTensor2, sigma: f64) -> Result<RealTensor2, ReconError> {
        let out = self.net.forward(&self.input(x, sigma))?.to_real()?;
        Ok(out.scale(1.0 / sigma))
    }
}

/// Denoising score matching with `sigma^2` weighting: draw a level index
/// uniformly, perturb `x` with `sigma z` and regress the net output on `-z`.
pub fn train_score(
    init: &LearnedScore,
    data: &[RealTensor2],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(LearnedScore, TrainReport), ReconError> {
    schedule.validate()?;
    let mut params = init.net.params().to_vec();
    let report = fit(
        &mut params,
        data.len(),
        cfg,
        "score training",
        |p, i, mut rng| {
            let x = &data[i];
            let sigma = schedule.sigma(rng.below(schedule.n_scales));
            let z = gaussian_real(&mut rng, x.rows(), x.cols());
            let noisy = x.zip_map(&z, |a, b| a + sigma * b)?;
            let mut tape = Tape::new();
            let vars: Vec<Var> = p.iter().map(|t| tape.param(t.clone())).collect();
            let input = tape.constant(init.input(&noisy, sigma));
            let out = init.net.record(&mut tape, &vars, input)?;
            let target = tape.constant(Tensor::from_real(&z.scale(-1.0)));
            let loss = tape.mse(out, target)?;
            tape.backward(loss)?;
            let value = tape.value(loss).item();
            let grads = vars
                .iter()
                .map(|&v| {
                    tape.grad(v)
                        .cloned()
                        .expect("param leaves receive gradients")
                })
                .collect();
            Ok((
                LossParts {
                    total: value,
                    image: value,
                    fidelity: 0.0,
                },
                grads,
            ))
        },
    )?;
    let mut trained = init.clone();
    trained.net.set_params(params)?;
    Ok((trained, report))
}
