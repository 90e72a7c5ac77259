//! Model training, checkpoints and the reconstructor set of an experiment.
//!
//! Every checkpoint stores a `spec_hash` over the inputs that determine its
//! weights (model spec, dataset and training masks). Loading a checkpoint
//! whose hash differs from the current config is a stale-artifact error.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use mri_robust::diffusion::{train_score, DiffusionRecon, LearnedScore};
use mri_robust::mri::SamplingMask;
use mri_robust::recon::net::CHECKPOINT_FILE;
use mri_robust::recon::train::{train_supervised, TrainReport};
use mri_robust::recon::{
    load_checkpoint, save_checkpoint, CgRecon, DenoiserNet, DenoiserRecon, Differentiable, NetArch,
    ReconError, Reconstructor, UnrolledRecon, ZeroFilled,
};
use mri_robust::tensor::{ComplexTensor2, RealTensor2, RngStream};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::HarnessError;

pub const DENOISER: &str = "denoiser";
pub const UNROLLED: &str = "unrolled";
pub const SCORE: &str = "score";

pub fn model_dir(out: &Path, name: &str) -> PathBuf {
    out.join("models").join(name)
}

fn digest(value: &Value) -> String {
    hex::encode(Sha256::digest(value.to_string().as_bytes()))
}

fn spec_value<T: serde::Serialize>(cfg: &ExperimentConfig, spec: &T) -> Value {
    json!({
        "spec": spec,
        "dataset": cfg.dataset_config(),
        "masks": cfg.mask_distribution(),
    })
}

/// Hash of everything that determines the weights of model `name`, or
/// `None` when the model is disabled.
pub fn spec_hash(cfg: &ExperimentConfig, name: &str) -> Option<String> {
    let m = &cfg.models;
    let value = match name {
        DENOISER => spec_value(cfg, m.denoiser.as_ref()?),
        UNROLLED => spec_value(cfg, m.unrolled.as_ref()?),
        SCORE => {
            let d = m.diffusion.as_ref()?;
            json!({
                "spec": {"net": d.net, "train": d.train, "init_seed": d.init_seed, "schedule": d.schedule},
                "dataset": cfg.dataset_config(),
            })
        }
        _ => return None,
    };
    Some(digest(&value))
}

/// Names of the trainable models enabled in `cfg`.
pub fn trained_models(cfg: &ExperimentConfig) -> Vec<&'static str> {
    [DENOISER, UNROLLED, SCORE]
        .into_iter()
        .filter(|n| spec_hash(cfg, n).is_some())
        .collect()
}

fn score_arch(cfg: &ExperimentConfig) -> Option<NetArch> {
    let d = cfg.models.diffusion.as_ref()?;
    Some(NetArch {
        kernel: d.net.kernel,
        slope: d.net.slope,
        ..LearnedScore::arch(d.net.hidden, d.net.depth)
    })
}

fn write_loss_csv(path: &Path, report: &TrainReport) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "total", "image", "fidelity"])?;
    for e in &report.epochs {
        w.serialize((e.epoch, e.loss.total, e.loss.image, e.loss.fidelity))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

/// Trains model `name` on `data` and writes its checkpoint and loss curve.
pub fn train_model(
    cfg: &ExperimentConfig,
    name: &str,
    data: &[RealTensor2],
    out: &Path,
) -> Result<TrainReport, HarnessError> {
    let hash = spec_hash(cfg, name)
        .ok_or_else(|| HarnessError::Config(format!("model {name} is disabled")))?;
    let dir = model_dir(out, name);
    let masks = cfg.mask_distribution();
    let m = &cfg.models;
    let report = match name {
        DENOISER => {
            let spec = m.denoiser.as_ref().expect("enabled");
            let mut rng = RngStream::new(spec.init_seed.expect("resolved config"));
            let init = DenoiserRecon::new(DenoiserNet::new(spec.arch(), &mut rng)?);
            let (trained, report) = train_supervised(&init, data, &masks, &spec.train.to_core())?;
            let meta = json!({"spec_hash": hash, "report": report});
            save_checkpoint(&dir, DENOISER, std::slice::from_ref(&trained.net), meta)?;
            report
        }
        UNROLLED => {
            let spec = m.unrolled.as_ref().expect("enabled");
            let mut rng = RngStream::new(spec.init_seed.expect("resolved config"));
            let init = UnrolledRecon::init(spec.unrolled(), spec.arch(), &mut rng)?;
            let (trained, report) = train_supervised(&init, data, &masks, &spec.train.to_core())?;
            let meta = json!({"spec_hash": hash, "config": trained.config(), "report": report});
            save_checkpoint(&dir, UNROLLED, trained.nets(), meta)?;
            report
        }
        SCORE => {
            let spec = m.diffusion.as_ref().expect("enabled");
            let mut rng = RngStream::new(spec.init_seed.expect("resolved config"));
            let arch = score_arch(cfg).expect("enabled");
            let init = LearnedScore::new(DenoiserNet::new(arch, &mut rng)?)?;
            let (trained, report) =
                train_score(&init, data, &spec.schedule(), &spec.train.to_core())?;
            trained.save(&dir, json!({"spec_hash": hash, "report": report}))?;
            report
        }
        _ => return Err(HarnessError::Config(format!("unknown model {name}"))),
    };
    write_loss_csv(&dir.join("loss.csv"), &report)?;
    Ok(report)
}

/// Checks that the checkpoint of `name` exists and matches `cfg`.
fn check_checkpoint(
    cfg: &ExperimentConfig,
    name: &str,
    out: &Path,
) -> Result<PathBuf, HarnessError> {
    let dir = model_dir(out, name);
    let path = dir.join(CHECKPOINT_FILE);
    if !path.is_file() {
        return Err(HarnessError::Dependency {
            artifact: path,
            stage: "train",
        });
    }
    let text = fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
    let header: Value = serde_json::from_str(&text)
        .map_err(|e| HarnessError::Recon(ReconError::Checkpoint(e.to_string())))?;
    let stored = header
        .pointer("/meta/spec_hash")
        .or_else(|| header.pointer("/meta/extra/spec_hash"))
        .and_then(Value::as_str);
    if stored != spec_hash(cfg, name).as_deref() {
        return Err(HarnessError::Stale {
            artifact: path,
            stage: "train",
        });
    }
    Ok(dir)
}

/// Memoizes a deterministic reconstructor on its exact input. Transfer
/// evaluation reconstructs the same clean measurement once per source and
/// budget; for the sampler this dominates the cost.
pub struct Cached<R> {
    inner: R,
    memo: Mutex<HashMap<[u8; 32], RealTensor2>>,
}

impl<R> Cached<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            memo: Mutex::new(HashMap::new()),
        }
    }

    pub fn inner(&self) -> &R {
        &self.inner
    }
}

fn input_key(ksp: &ComplexTensor2, mask: &SamplingMask) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((ksp.rows() as u64).to_le_bytes());
    h.update((ksp.cols() as u64).to_le_bytes());
    for z in ksp.data() {
        h.update(z.re.to_bits().to_le_bytes());
        h.update(z.im.to_bits().to_le_bytes());
    }
    for r in 0..mask.rows() {
        h.update([mask.is_selected(r) as u8]);
    }
    h.finalize().into()
}

impl<R: Reconstructor> Reconstructor for Cached<R> {
    fn name(&self) -> String {
        self.inner.name()
    }

    fn reconstruct(
        &self,
        ksp: &ComplexTensor2,
        mask: &SamplingMask,
    ) -> Result<RealTensor2, ReconError> {
        let key = input_key(ksp, mask);
        if let Some(hit) = self.memo.lock().expect("memo lock").get(&key) {
            return Ok(hit.clone());
        }
        let image = self.inner.reconstruct(ksp, mask)?;
        self.memo
            .lock()
            .expect("memo lock")
            .insert(key, image.clone());
        Ok(image)
    }
}

/// Every reconstructor enabled in a config, trained ones loaded from disk.
pub struct ModelSet {
    pub zero_filled: Option<ZeroFilled>,
    pub cg: Option<CgRecon>,
    pub denoiser: Option<DenoiserRecon>,
    pub unrolled: Option<UnrolledRecon>,
    pub diffusion: Option<Cached<DiffusionRecon>>,
}

fn single_net(kind: &str, nets: Vec<DenoiserNet>) -> Result<DenoiserNet, HarnessError> {
    let mut nets = nets;
    if nets.len() != 1 {
        return Err(HarnessError::Recon(ReconError::Checkpoint(format!(
            "{kind} checkpoint holds {} nets, expected 1",
            nets.len()
        ))));
    }
    Ok(nets.remove(0))
}

impl ModelSet {
    pub fn load(cfg: &ExperimentConfig, out: &Path) -> Result<Self, HarnessError> {
        let m = &cfg.models;
        let denoiser = match &m.denoiser {
            Some(_) => {
                let (_, nets) = load_checkpoint(check_checkpoint(cfg, DENOISER, out)?)?;
                Some(DenoiserRecon::new(single_net(DENOISER, nets)?))
            }
            None => None,
        };
        let unrolled = match &m.unrolled {
            Some(spec) => {
                let (_, nets) = load_checkpoint(check_checkpoint(cfg, UNROLLED, out)?)?;
                Some(UnrolledRecon::new(spec.unrolled(), nets)?)
            }
            None => None,
        };
        let diffusion = match &m.diffusion {
            Some(spec) => {
                let score = LearnedScore::load(check_checkpoint(cfg, SCORE, out)?)?;
                let recon = DiffusionRecon::new(Arc::new(score), spec.schedule(), spec.sampler());
                Some(Cached::new(recon))
            }
            None => None,
        };
        Ok(Self {
            zero_filled: m.zero_filled.then_some(ZeroFilled),
            cg: m.cg.as_ref().map(|c| CgRecon {
                config: c.to_core(),
            }),
            denoiser,
            unrolled,
            diffusion,
        })
    }

    /// Enabled reconstructors under their report names, in a fixed order.
    pub fn targets(&self) -> Vec<(String, &dyn Reconstructor)> {
        let all: [Option<&dyn Reconstructor>; 5] = [
            self.zero_filled.as_ref().map(|r| r as &dyn Reconstructor),
            self.cg.as_ref().map(|r| r as &dyn Reconstructor),
            self.denoiser.as_ref().map(|r| r as &dyn Reconstructor),
            self.unrolled.as_ref().map(|r| r as &dyn Reconstructor),
            self.diffusion.as_ref().map(|r| r as &dyn Reconstructor),
        ];
        all.into_iter().flatten().map(|r| (r.name(), r)).collect()
    }

    /// The differentiable model called `name`, if enabled.
    pub fn source(&self, name: &str) -> Option<&dyn Differentiable> {
        match name {
            "zero_filled" => self.zero_filled.as_ref().map(|r| r as &dyn Differentiable),
            DENOISER => self.denoiser.as_ref().map(|r| r as &dyn Differentiable),
            UNROLLED => self.unrolled.as_ref().map(|r| r as &dyn Differentiable),
            _ => None,
        }
    }
}
