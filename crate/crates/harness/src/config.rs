//! Experiment configuration: JSON schema, environment overrides, seed
//! resolution and the config hash stamped on every output row.

use std::path::Path;

use mri_robust::attack::{AttackConfig, LearningRate};
use mri_robust::diffusion::{NoiseSchedule, SamplerConfig, StepOrder};
use mri_robust::mri::NoiseModel;
use mri_robust::phantom::{DatasetConfig, PhantomKind};
use mri_robust::recon::train::{MaskDistribution, TrainConfig};
use mri_robust::recon::{CgConfig, NetArch, UnrolledConfig};
use mri_robust::tensor::derive_seed;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::HarnessError;

/// Prefix of environment variables that override config keys. Nested keys
/// are joined with `__`, e.g. `MRIROBUST_ATTACK__ITERS=50`.
pub const ENV_PREFIX: &str = "MRIROBUST_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Base seed; every unset seed below is derived from it.
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub mask: MaskSpec,
    pub models: ModelsSpec,
    pub reconstruct: ReconstructSpec,
    pub attack: AttackSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetSpec::default(),
            mask: MaskSpec::default(),
            models: ModelsSpec::default(),
            reconstruct: ReconstructSpec::default(),
            attack: AttackSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub kind: PhantomKind,
    pub size: usize,
    pub count: usize,
    pub count_range: (usize, usize),
    pub train_fraction: f64,
    pub seed: Option<u64>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        let d = DatasetConfig::default();
        Self {
            kind: d.kind,
            size: d.size,
            count: d.count,
            count_range: d.count_range,
            train_fraction: d.train_fraction,
            seed: None,
        }
    }
}

/// Acquisition used for training and for attack / transfer evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskSpec {
    pub acceleration: f64,
    pub center_fraction: f64,
    pub noise_sigma: f64,
    /// Seed of the evaluation masks; item `i` uses `derive_seed(seed, i)`.
    pub seed: Option<u64>,
}

impl Default for MaskSpec {
    fn default() -> Self {
        let m = MaskDistribution::default();
        Self {
            acceleration: m.acceleration,
            center_fraction: m.center_fraction,
            noise_sigma: m.noise.sigma,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSpec {
    pub lambda_fid: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: Option<u64>,
}

impl Default for TrainSpec {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lambda_fid: t.lambda_fid,
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetSpec {
    pub hidden: usize,
    pub depth: usize,
    pub kernel: usize,
    pub slope: f64,
}

impl Default for NetSpec {
    fn default() -> Self {
        let a = NetArch::default();
        Self {
            hidden: a.hidden,
            depth: a.depth,
            kernel: a.kernel,
            slope: a.slope,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserSpec {
    pub net: NetSpec,
    pub train: TrainSpec,
    /// Seed of the weight initialization.
    pub init_seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnrolledSpec {
    pub net: NetSpec,
    pub n_iters: usize,
    pub step_size: f64,
    pub shared_weights: bool,
    pub train: TrainSpec,
    pub init_seed: Option<u64>,
}

impl Default for UnrolledSpec {
    fn default() -> Self {
        let u = UnrolledConfig::default();
        Self {
            net: NetSpec::default(),
            n_iters: u.n_iters,
            step_size: u.step_size,
            shared_weights: u.shared_weights,
            train: TrainSpec::default(),
            init_seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleSpec {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub n_scales: usize,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        let s = NoiseSchedule::default();
        Self {
            sigma_min: s.sigma_min,
            sigma_max: s.sigma_max,
            n_scales: s.n_scales,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerSpec {
    pub snr_eta: f64,
    pub dc_lambda: f64,
    pub corrector_steps: usize,
    pub noisy_measurements: bool,
    pub order: StepOrder,
    pub final_dc: bool,
    pub seed: Option<u64>,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        let s = SamplerConfig::default();
        Self {
            snr_eta: s.snr_eta,
            dc_lambda: s.dc_lambda,
            corrector_steps: s.corrector_steps,
            noisy_measurements: s.noisy_measurements,
            order: s.order,
            final_dc: s.final_dc,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionSpec {
    pub net: NetSpec,
    pub train: TrainSpec,
    pub init_seed: Option<u64>,
    pub schedule: ScheduleSpec,
    pub sampler: SamplerSpec,
}

impl Default for DiffusionSpec {
    fn default() -> Self {
        Self {
            net: NetSpec::default(),
            train: TrainSpec::default(),
            init_seed: None,
            schedule: ScheduleSpec::default(),
            sampler: SamplerSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CgSpec {
    pub lambda: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for CgSpec {
    fn default() -> Self {
        let c = CgConfig::default();
        Self {
            lambda: c.lambda,
            max_iters: c.max_iters,
            tol: c.tol,
        }
    }
}

/// Reconstructors in the experiment. Setting a model to `null` removes it
/// from every stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelsSpec {
    pub zero_filled: bool,
    pub cg: Option<CgSpec>,
    pub denoiser: Option<DenoiserSpec>,
    pub unrolled: Option<UnrolledSpec>,
    pub diffusion: Option<DiffusionSpec>,
}

impl Default for ModelsSpec {
    fn default() -> Self {
        Self {
            zero_filled: true,
            cg: Some(CgSpec::default()),
            denoiser: Some(DenoiserSpec::default()),
            unrolled: Some(UnrolledSpec::default()),
            diffusion: Some(DiffusionSpec::default()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconstructSpec {
    pub accelerations: Vec<f64>,
}

impl Default for ReconstructSpec {
    fn default() -> Self {
        Self {
            accelerations: vec![4.0, 8.0, 12.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackSpec {
    pub epsilons: Vec<f64>,
    pub iters: usize,
    pub lr: LearningRate,
    pub init_scale_c: f64,
    /// Number of test items attacked; all when unset.
    pub items: Option<usize>,
    /// Differentiable models used to craft perturbations; every enabled
    /// trained model when unset.
    pub sources: Option<Vec<String>>,
    pub seed: Option<u64>,
}

impl Default for AttackSpec {
    fn default() -> Self {
        let a = AttackConfig::default();
        Self {
            epsilons: vec![0.005, 0.01, 0.02, 0.05, 0.1],
            iters: a.iters,
            lr: a.lr,
            init_scale_c: a.init_scale_c,
            items: None,
            sources: None,
            seed: None,
        }
    }
}

fn arch(net: &NetSpec, in_channels: usize, residual: bool) -> NetArch {
    NetArch {
        in_channels,
        out_channels: 1,
        hidden: net.hidden,
        depth: net.depth,
        kernel: net.kernel,
        slope: net.slope,
        residual,
    }
}

impl TrainSpec {
    pub fn to_core(&self) -> TrainConfig {
        TrainConfig {
            lambda_fid: self.lambda_fid,
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed.expect("resolved config"),
        }
    }
}

impl DenoiserSpec {
    pub fn arch(&self) -> NetArch {
        arch(&self.net, 1, true)
    }
}

impl UnrolledSpec {
    pub fn arch(&self) -> NetArch {
        arch(&self.net, 1, true)
    }

    pub fn unrolled(&self) -> UnrolledConfig {
        UnrolledConfig {
            n_iters: self.n_iters,
            step_size: self.step_size,
            shared_weights: self.shared_weights,
        }
    }
}

impl DiffusionSpec {
    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule {
            sigma_min: self.schedule.sigma_min,
            sigma_max: self.schedule.sigma_max,
            n_scales: self.schedule.n_scales,
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        let s = &self.sampler;
        SamplerConfig {
            snr_eta: s.snr_eta,
            dc_lambda: s.dc_lambda,
            corrector_steps: s.corrector_steps,
            seed: s.seed.expect("resolved config"),
            noisy_measurements: s.noisy_measurements,
            order: s.order,
            final_dc: s.final_dc,
        }
    }
}

impl CgSpec {
    pub fn to_core(&self) -> CgConfig {
        CgConfig {
            lambda: self.lambda,
            max_iters: self.max_iters,
            tol: self.tol,
        }
    }
}

/// Seed tags for derived seeds; stable across releases.
mod tag {
    pub const DATASET: u64 = 1;
    pub const MASK: u64 = 2;
    pub const DENOISER_INIT: u64 = 3;
    pub const DENOISER_TRAIN: u64 = 4;
    pub const UNROLLED_INIT: u64 = 5;
    pub const UNROLLED_TRAIN: u64 = 6;
    pub const SCORE_INIT: u64 = 7;
    pub const SCORE_TRAIN: u64 = 8;
    pub const SAMPLER: u64 = 9;
    pub const ATTACK: u64 = 10;
}

impl ExperimentConfig {
    /// Fills every unset seed from the base seed.
    pub fn resolve_seeds(&mut self) {
        let base = self.seed;
        let fill = |slot: &mut Option<u64>, t: u64| {
            slot.get_or_insert(derive_seed(base, t));
        };
        fill(&mut self.dataset.seed, tag::DATASET);
        fill(&mut self.mask.seed, tag::MASK);
        if let Some(d) = &mut self.models.denoiser {
            fill(&mut d.init_seed, tag::DENOISER_INIT);
            fill(&mut d.train.seed, tag::DENOISER_TRAIN);
        }
        if let Some(u) = &mut self.models.unrolled {
            fill(&mut u.init_seed, tag::UNROLLED_INIT);
            fill(&mut u.train.seed, tag::UNROLLED_TRAIN);
        }
        if let Some(s) = &mut self.models.diffusion {
            fill(&mut s.init_seed, tag::SCORE_INIT);
            fill(&mut s.train.seed, tag::SCORE_TRAIN);
            fill(&mut s.sampler.seed, tag::SAMPLER);
        }
        fill(&mut self.attack.seed, tag::ATTACK);
    }

    /// Overrides the base seed and re-derives every seed from it.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.dataset.seed = None;
        self.mask.seed = None;
        if let Some(d) = &mut self.models.denoiser {
            d.init_seed = None;
            d.train.seed = None;
        }
        if let Some(u) = &mut self.models.unrolled {
            u.init_seed = None;
            u.train.seed = None;
        }
        if let Some(s) = &mut self.models.diffusion {
            s.init_seed = None;
            s.train.seed = None;
            s.sampler.seed = None;
        }
        self.attack.seed = None;
        self.resolve_seeds();
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            kind: self.dataset.kind,
            size: self.dataset.size,
            count: self.dataset.count,
            seed: self.dataset.seed.expect("resolved config"),
            count_range: self.dataset.count_range,
            train_fraction: self.dataset.train_fraction,
        }
    }

    pub fn mask_distribution(&self) -> MaskDistribution {
        MaskDistribution {
            acceleration: self.mask.acceleration,
            center_fraction: self.mask.center_fraction,
            noise: NoiseModel {
                sigma: self.mask.noise_sigma,
            },
        }
    }

    pub fn attack_config(&self, epsilon: f64) -> AttackConfig {
        AttackConfig {
            epsilon,
            iters: self.attack.iters,
            lr: self.attack.lr,
            init_scale_c: self.attack.init_scale_c,
            seed: self.attack.seed.expect("resolved config"),
        }
    }

    /// Range and consistency checks that serde cannot express.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if !self.dataset.size.is_power_of_two() {
            return bad(format!(
                "dataset.size {} must be a power of two",
                self.dataset.size
            ));
        }
        if !(self.mask.acceleration >= 1.0) {
            return bad(format!(
                "mask.acceleration must be >= 1, got {}",
                self.mask.acceleration
            ));
        }
        if !(0.0..1.0).contains(&self.mask.center_fraction) {
            return bad(format!(
                "mask.center_fraction must lie in [0, 1), got {}",
                self.mask.center_fraction
            ));
        }
        if !(self.mask.noise_sigma >= 0.0) {
            return bad(format!(
                "mask.noise_sigma must be >= 0, got {}",
                self.mask.noise_sigma
            ));
        }
        if self.reconstruct.accelerations.iter().any(|&a| !(a >= 1.0)) {
            return bad("reconstruct.accelerations must all be >= 1".into());
        }
        if self
            .attack
            .epsilons
            .iter()
            .any(|&e| !(e >= 0.0) || !e.is_finite())
        {
            return bad("attack.epsilons must be finite and >= 0".into());
        }
        for e in &self.attack.epsilons {
            self.attack_config(*e)
                .validate()
                .map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        if let Some(sources) = &self.attack.sources {
            for s in sources {
                let enabled = match s.as_str() {
                    "zero_filled" => self.models.zero_filled,
                    "denoiser" => self.models.denoiser.is_some(),
                    "unrolled" => self.models.unrolled.is_some(),
                    _ => {
                        return bad(format!(
                            "attack.sources: {s:?} is not a differentiable model"
                        ))
                    }
                };
                if !enabled {
                    return bad(format!("attack.sources: model {s:?} is disabled"));
                }
            }
        }
        let train_specs = [
            self.models
                .denoiser
                .as_ref()
                .map(|d| ("denoiser", &d.train)),
            self.models
                .unrolled
                .as_ref()
                .map(|u| ("unrolled", &u.train)),
            self.models
                .diffusion
                .as_ref()
                .map(|s| ("diffusion", &s.train)),
        ];
        for (name, t) in train_specs.into_iter().flatten() {
            t.to_core()
                .validate()
                .map_err(|e| HarnessError::Config(format!("models.{name}.train: {e}")))?;
        }
        if let Some(s) = &self.models.diffusion {
            s.schedule()
                .validate()
                .and_then(|_| s.sampler().validate())
                .map_err(|e| HarnessError::Config(format!("models.diffusion: {e}")))?;
        }
        Ok(())
    }

    /// Names of the attack sources, in a fixed order.
    pub fn sources(&self) -> Vec<String> {
        match &self.attack.sources {
            Some(list) => {
                let mut out = list.clone();
                out.sort();
                out.dedup();
                out
            }
            None => {
                let mut out = Vec::new();
                if self.models.denoiser.is_some() {
                    out.push("denoiser".to_string());
                }
                if self.models.unrolled.is_some() {
                    out.push("unrolled".to_string());
                }
                out
            }
        }
    }

    /// Hex SHA-256 of the canonical JSON of the resolved config.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Applies `PREFIX_A__B=value` overrides to a JSON tree. Values that parse
/// as JSON are used as such, anything else as a string.
pub fn apply_env_overrides(
    root: &mut Value,
    vars: impl IntoIterator<Item = (String, String)>,
) -> Result<(), HarnessError> {
    let mut vars: Vec<(String, String)> = vars
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..]
            .split("__")
            .map(|p| p.to_ascii_lowercase())
            .collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(HarnessError::Config(format!(
                "malformed override variable {key}"
            )));
        }
        let value = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
        let mut node = &mut *root;
        for part in &path[..path.len() - 1] {
            if !node.is_object() {
                return Err(HarnessError::Config(format!(
                    "{key}: {part} is not an object"
                )));
            }
            node = node
                .as_object_mut()
                .expect("checked above")
                .entry(part.clone())
                .or_insert_with(|| Value::Object(Default::default()));
        }
        match node.as_object_mut() {
            Some(map) => {
                map.insert(path[path.len() - 1].clone(), value);
            }
            None => {
                return Err(HarnessError::Config(format!(
                    "{key}: parent is not an object"
                )))
            }
        }
    }
    Ok(())
}

/// Deserializes a config tree, rejecting unknown keys with the full list.
pub fn from_value(value: Value) -> Result<ExperimentConfig, HarnessError> {
    let mut unknown = Vec::new();
    let cfg: ExperimentConfig = serde_ignored::deserialize(value, |path| {
        unknown.push(path.to_string().replace(".?", ""))
    })
    .map_err(|e| HarnessError::Config(e.to_string()))?;
    if !unknown.is_empty() {
        return Err(HarnessError::Config(format!(
            "unknown keys: {}",
            unknown.join(", ")
        )));
    }
    Ok(cfg)
}

/// Reads a config file, applies overrides, resolves seeds and validates.
pub fn load(
    path: Option<&Path>,
    env: impl IntoIterator<Item = (String, String)>,
    seed: Option<u64>,
) -> Result<ExperimentConfig, HarnessError> {
    let mut value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| HarnessError::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| HarnessError::Config(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    apply_env_overrides(&mut value, env)?;
    let mut cfg = from_value(value)?;
    match seed {
        Some(s) => cfg.reseed(s),
        None => cfg.resolve_seeds(),
    }
    cfg.validate()?;
    Ok(cfg)
}
