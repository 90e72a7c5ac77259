//! Experiment stages and the output directory layout.
//!
//! ```text
//! <out>/config.json                resolved config (its hash tags every row)
//! <out>/data/                      phantom dataset (manifest.json + *.tnsr)
//! <out>/models/<name>/             checkpoint (model.json + *.tnsr), loss.csv
//! <out>/reconstruct/<model>.csv    clean metrics over the acceleration grid
//! <out>/attack/whitebox.csv        perturbations evaluated on their source
//! <out>/transfer/transfer.csv      every source evaluated on every target
//! <out>/report/                    summary tables, SVG plots, report.json
//! <out>/run_record.json            written by `run`
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use mri_robust::attack::{item_seeds, transfer_evaluate, TransferItem, TransferRow};
use mri_robust::metrics::{data_range, psnr, ssim};
use mri_robust::mri::{forward, make_cartesian_mask, SamplingMask};
use mri_robust::phantom::{
    build_dataset, load_dataset, save_dataset, DatasetSplits, MANIFEST_FILE,
};
use mri_robust::recon::train::TrainReport;
use mri_robust::recon::{ReconError, Reconstructor};
use mri_robust::tensor::{derive_seed, ComplexTensor2, RealTensor2, RngStream};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::HarnessError;
use crate::models::{model_dir, train_model, trained_models, ModelSet};
use crate::plot::{line_plot, Series};

pub const CONFIG_FILE: &str = "config.json";
pub const RUN_RECORD_FILE: &str = "run_record.json";
pub const DIFFUSION: &str = "diffusion";

pub fn data_dir(out: &Path) -> PathBuf {
    out.join("data")
}

pub fn reconstruct_dir(out: &Path) -> PathBuf {
    out.join("reconstruct")
}

pub fn whitebox_csv(out: &Path) -> PathBuf {
    out.join("attack").join("whitebox.csv")
}

pub fn transfer_csv(out: &Path) -> PathBuf {
    out.join("transfer").join("transfer.csv")
}

pub fn report_dir(out: &Path) -> PathBuf {
    out.join("report")
}

/// Clean reconstruction quality of one (model, acceleration, item).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconRow {
    pub config_hash: String,
    pub model: String,
    pub acceleration: f64,
    pub center_fraction: f64,
    pub item: usize,
    pub mask_seed: u64,
    pub sampler_seed: Option<u64>,
    pub ssim: f64,
    pub psnr: f64,
}

/// One (source, target, epsilon, item) evaluation with the seeds needed to
/// regenerate it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub config_hash: String,
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
    pub mask_seed: u64,
    pub attack_seed: u64,
    pub random_seed: u64,
    pub sampler_seed: Option<u64>,
}

impl AttackRow {
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

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n").map_err(|e| HarnessError::io(path, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, HarnessError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

fn reset_dir(dir: &Path) -> Result<(), HarnessError> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}

/// Writes the resolved config next to the results.
pub fn write_config(cfg: &ExperimentConfig, out: &Path) -> Result<(), HarnessError> {
    write_json(&out.join(CONFIG_FILE), cfg)
}

pub fn phantom(cfg: &ExperimentConfig, out: &Path) -> Result<DatasetSplits, HarnessError> {
    let splits = build_dataset(&cfg.dataset_config())?;
    save_dataset(data_dir(out), &splits)?;
    info!(
        "phantom: {} train, {} test images",
        splits.train.len(),
        splits.test.len()
    );
    Ok(splits)
}

/// Loads the dataset written by `phantom` and checks it matches `cfg`.
pub fn load_data(cfg: &ExperimentConfig, out: &Path) -> Result<DatasetSplits, HarnessError> {
    let manifest = data_dir(out).join(MANIFEST_FILE);
    if !manifest.is_file() {
        return Err(HarnessError::Dependency {
            artifact: manifest,
            stage: "phantom",
        });
    }
    let splits = load_dataset(data_dir(out))?;
    if splits.config != cfg.dataset_config() {
        return Err(HarnessError::Stale {
            artifact: manifest,
            stage: "phantom",
        });
    }
    Ok(splits)
}

pub fn train(
    cfg: &ExperimentConfig,
    out: &Path,
) -> Result<Vec<(String, TrainReport)>, HarnessError> {
    let splits = load_data(cfg, out)?;
    let data = splits.train.images();
    let names = trained_models(cfg);
    if data.is_empty() && !names.is_empty() {
        return Err(HarnessError::EmptyInput(
            "the training split is empty".into(),
        ));
    }
    let mut reports = Vec::new();
    for name in names {
        let start = Instant::now();
        let report = train_model(cfg, name, &data, out)?;
        info!(
            "train: {name} loss {:.4e} -> {:.4e} in {:.1}s ({})",
            report.initial_loss().unwrap_or(f64::NAN),
            report.final_loss().unwrap_or(f64::NAN),
            start.elapsed().as_secs_f64(),
            model_dir(out, name).display()
        );
        reports.push((name.to_string(), report));
    }
    Ok(reports)
}

/// Acquisition of test item `index` at `acceleration`. The mask and the
/// measurement noise come from one stream seeded with the returned seed.
pub fn measure(
    cfg: &ExperimentConfig,
    index: usize,
    gt: &RealTensor2,
    acceleration: f64,
) -> Result<(u64, SamplingMask, ComplexTensor2), HarnessError> {
    let seed = derive_seed(cfg.mask.seed.expect("resolved config"), index as u64);
    let mut rng = RngStream::new(seed);
    let mask = make_cartesian_mask(gt.rows(), acceleration, cfg.mask.center_fraction, &mut rng)
        .map_err(ReconError::from)?;
    let ksp = forward(gt, &mask, cfg.mask_distribution().noise, &mut rng)
        .map_err(ReconError::from)?
        .ksp;
    Ok((seed, mask, ksp))
}

fn test_images(splits: &DatasetSplits) -> Result<Vec<RealTensor2>, HarnessError> {
    if splits.test.is_empty() {
        return Err(HarnessError::EmptyInput("the test split is empty".into()));
    }
    Ok(splits.test.images())
}

fn sampler_seed(cfg: &ExperimentConfig, target: &str) -> Option<u64> {
    match (target, &cfg.models.diffusion) {
        (DIFFUSION, Some(d)) => d.sampler.seed,
        _ => None,
    }
}

fn recon_row(
    cfg: &ExperimentConfig,
    hash: &str,
    (name, recon): &(String, &dyn Reconstructor),
    acceleration: f64,
    item: usize,
    gt: &RealTensor2,
) -> Result<ReconRow, HarnessError> {
    let (mask_seed, mask, ksp) = measure(cfg, item, gt, acceleration)?;
    let image = recon.reconstruct(&ksp, &mask)?;
    let l = data_range(gt);
    let metric = |e| HarnessError::Recon(ReconError::Config(format!("{name}, item {item}: {e}")));
    Ok(ReconRow {
        config_hash: hash.to_string(),
        model: name.clone(),
        acceleration,
        center_fraction: cfg.mask.center_fraction,
        item,
        mask_seed,
        sampler_seed: sampler_seed(cfg, name),
        ssim: ssim(gt, &image, l).map_err(metric)?,
        psnr: psnr(gt, &image, l).map_err(metric)?,
    })
}

/// Runs every enabled model over the test split at every acceleration and
/// writes one CSV per model.
pub fn reconstruct(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<ReconRow>, HarnessError> {
    let splits = load_data(cfg, out)?;
    let images = test_images(&splits)?;
    let models = ModelSet::load(cfg, out)?;
    let targets = models.targets();
    let hash = cfg.hash();
    let n_items = images.len();
    let units: Vec<(usize, f64, usize)> = (0..targets.len())
        .flat_map(|t| {
            cfg.reconstruct
                .accelerations
                .iter()
                .flat_map(move |&a| (0..n_items).map(move |i| (t, a, i)))
        })
        .collect();
    let mut rows: Vec<ReconRow> = units
        .par_iter()
        .map(|&(t, a, i)| recon_row(cfg, &hash, &targets[t], a, i, &images[i]))
        .collect::<Result<_, _>>()?;
    rows.sort_by(|a, b| {
        a.model
            .cmp(&b.model)
            .then(a.acceleration.total_cmp(&b.acceleration))
            .then(a.item.cmp(&b.item))
    });
    let dir = reconstruct_dir(out);
    reset_dir(&dir)?;
    for (name, _) in &targets {
        let own: Vec<&ReconRow> = rows.iter().filter(|r| &r.model == name).collect();
        write_csv(&dir.join(format!("{name}.csv")), &own)?;
    }
    info!(
        "reconstruct: {} rows for {} models",
        rows.len(),
        targets.len()
    );
    Ok(rows)
}

/// Attack items: the first `attack.items` test images at the training
/// acquisition.
pub fn attack_items(
    cfg: &ExperimentConfig,
    splits: &DatasetSplits,
) -> Result<Vec<(TransferItem, u64)>, HarnessError> {
    let images = test_images(splits)?;
    let n = cfg
        .attack
        .items
        .map_or(images.len(), |k| k.min(images.len()));
    if n == 0 {
        return Err(HarnessError::EmptyInput("attack.items is 0".into()));
    }
    images
        .into_iter()
        .take(n)
        .enumerate()
        .map(|(index, gt)| {
            let (seed, mask, ksp) = measure(cfg, index, &gt, cfg.mask.acceleration)?;
            Ok((
                TransferItem {
                    index,
                    gt,
                    ksp,
                    mask,
                },
                seed,
            ))
        })
        .collect()
}

fn attack_row(
    cfg: &ExperimentConfig,
    hash: &str,
    mask_seeds: &[u64],
    row: TransferRow,
) -> AttackRow {
    let (attack_seed, random_seed) =
        item_seeds(cfg.attack.seed.expect("resolved config"), row.item);
    debug_assert_eq!(attack_seed, row.seed);
    AttackRow {
        config_hash: hash.to_string(),
        sampler_seed: sampler_seed(cfg, &row.target),
        source: row.source,
        target: row.target,
        epsilon: row.epsilon,
        item: row.item,
        ssim_clean: row.ssim_clean,
        ssim_adv: row.ssim_adv,
        ssim_rand: row.ssim_rand,
        psnr_clean: row.psnr_clean,
        psnr_adv: row.psnr_adv,
        psnr_rand: row.psnr_rand,
        delta_rel_norm: row.delta_rel_norm,
        mask_seed: mask_seeds[row.item],
        attack_seed,
        random_seed,
    }
}

fn sort_rows(rows: &mut [AttackRow]) {
    rows.sort_by(|a, b| {
        (&a.source, &a.target)
            .cmp(&(&b.source, &b.target))
            .then(a.epsilon.total_cmp(&b.epsilon))
            .then(a.item.cmp(&b.item))
    });
}

/// Crafts perturbations on every source over the epsilon grid and evaluates
/// them on the source itself, or on every target when `all_targets`.
fn evaluate(
    cfg: &ExperimentConfig,
    out: &Path,
    all_targets: bool,
) -> Result<Vec<AttackRow>, HarnessError> {
    let splits = load_data(cfg, out)?;
    let items = attack_items(cfg, &splits)?;
    let models = ModelSet::load(cfg, out)?;
    let sources = cfg.sources();
    if sources.is_empty() {
        return Err(HarnessError::Config(
            "no differentiable attack source is enabled".into(),
        ));
    }
    let mask_seeds: Vec<u64> = items.iter().map(|(_, s)| *s).collect();
    let items: Vec<TransferItem> = items.into_iter().map(|(it, _)| it).collect();
    let hash = cfg.hash();
    let mut rows = Vec::new();
    for name in &sources {
        let source = models.source(name).ok_or_else(|| {
            HarnessError::Config(format!("attack source {name} is not available"))
        })?;
        let targets = if all_targets {
            models.targets()
        } else {
            vec![(name.clone(), source as &dyn Reconstructor)]
        };
        for &eps in &cfg.attack.epsilons {
            let start = Instant::now();
            let report = transfer_evaluate(source, &targets, &items, &cfg.attack_config(eps))?;
            info!(
                "{}: source {name}, epsilon {eps}: {} rows in {:.1}s",
                if all_targets { "transfer" } else { "attack" },
                report.rows.len(),
                start.elapsed().as_secs_f64()
            );
            rows.extend(
                report
                    .rows
                    .into_iter()
                    .map(|r| attack_row(cfg, &hash, &mask_seeds, r)),
            );
        }
    }
    sort_rows(&mut rows);
    Ok(rows)
}

/// White-box sweep: each source attacked and evaluated on itself.
pub fn attack(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<AttackRow>, HarnessError> {
    let rows = evaluate(cfg, out, false)?;
    write_csv(&whitebox_csv(out), &rows)?;
    Ok(rows)
}

/// Full matrix: every source evaluated on every enabled target, the
/// white-box diagonal included.
pub fn transfer(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<AttackRow>, HarnessError> {
    let rows = evaluate(cfg, out, true)?;
    write_csv(&transfer_csv(out), &rows)?;
    Ok(rows)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Medians of one (family, source, target, epsilon) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub config_hash: String,
    pub family: String,
    pub source: String,
    pub target: String,
    pub epsilon: f64,
    pub n: usize,
    pub ssim_clean: f64,
    pub ssim_adv: f64,
    pub ssim_rand: f64,
    pub delta_ssim_adv: f64,
    pub delta_ssim_rand: f64,
    pub delta_psnr_adv: f64,
    pub delta_psnr_rand: f64,
}

/// Medians of one (model, acceleration) cell of the reconstruct stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconSummaryRow {
    pub config_hash: String,
    pub model: String,
    pub acceleration: f64,
    pub n: usize,
    pub ssim: f64,
    pub psnr: f64,
}

fn summarize(hash: &str, family: &str, rows: &[AttackRow]) -> Vec<SummaryRow> {
    let mut cells: BTreeMap<(String, String, u64), Vec<&AttackRow>> = BTreeMap::new();
    for r in rows {
        cells
            .entry((r.source.clone(), r.target.clone(), r.epsilon.to_bits()))
            .or_default()
            .push(r);
    }
    let mut out: Vec<SummaryRow> = cells
        .into_iter()
        .map(|((source, target, eps), cell)| {
            let med =
                |f: fn(&AttackRow) -> f64| median(&cell.iter().map(|r| f(r)).collect::<Vec<_>>());
            SummaryRow {
                config_hash: hash.to_string(),
                family: family.to_string(),
                source,
                target,
                epsilon: f64::from_bits(eps),
                n: cell.len(),
                ssim_clean: med(|r| r.ssim_clean),
                ssim_adv: med(|r| r.ssim_adv),
                ssim_rand: med(|r| r.ssim_rand),
                delta_ssim_adv: med(AttackRow::delta_ssim_adv),
                delta_ssim_rand: med(AttackRow::delta_ssim_rand),
                delta_psnr_adv: med(AttackRow::delta_psnr_adv),
                delta_psnr_rand: med(AttackRow::delta_psnr_rand),
            }
        })
        .collect();
    out.sort_by(|a, b| {
        (&a.source, &a.target)
            .cmp(&(&b.source, &b.target))
            .then(a.epsilon.total_cmp(&b.epsilon))
    });
    out
}

/// One series per (source, target) pair: the median of `metric` against
/// epsilon.
fn pair_series(summary: &[SummaryRow], metric: fn(&SummaryRow) -> f64) -> Vec<Series> {
    let mut pairs: BTreeMap<(String, String), Vec<(f64, f64)>> = BTreeMap::new();
    for r in summary {
        pairs
            .entry((r.source.clone(), r.target.clone()))
            .or_default()
            .push((r.epsilon, metric(r)));
    }
    pairs
        .into_iter()
        .map(|((source, target), points)| Series {
            label: format!("{source} -> {target}"),
            points,
        })
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

/// Plot name, y-axis label and metric of each attack plot.
const ATTACK_PLOTS: [(&str, &str, fn(&SummaryRow) -> f64); 3] = [
    ("delta_ssim", "median SSIM drop", |r| r.delta_ssim_adv),
    ("delta_psnr", "median pSNR drop (dB)", |r| r.delta_psnr_adv),
    ("ssim", "median SSIM under attack", |r| r.ssim_adv),
];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportOutput {
    pub summary: Vec<SummaryRow>,
    pub reconstruct: Vec<ReconSummaryRow>,
    /// Written files, relative to the output directory.
    pub files: Vec<PathBuf>,
}

fn load_family(
    cfg: &ExperimentConfig,
    path: &Path,
    stage: &'static str,
) -> Result<Option<Vec<AttackRow>>, HarnessError> {
    if !path.is_file() {
        return Ok(None);
    }
    let rows: Vec<AttackRow> = read_csv(path)?;
    let hash = cfg.hash();
    if rows.iter().any(|r| r.config_hash != hash) {
        return Err(HarnessError::Stale {
            artifact: path.to_path_buf(),
            stage,
        });
    }
    Ok(Some(rows))
}

fn load_reconstruct(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<ReconRow>, HarnessError> {
    let dir = reconstruct_dir(out);
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| HarnessError::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    let hash = cfg.hash();
    let mut rows = Vec::new();
    for p in paths {
        let part: Vec<ReconRow> = read_csv(&p)?;
        if part.iter().any(|r| r.config_hash != hash) {
            return Err(HarnessError::Stale {
                artifact: p,
                stage: "reconstruct",
            });
        }
        rows.extend(part);
    }
    Ok(rows)
}

fn summarize_reconstruct(hash: &str, rows: &[ReconRow]) -> Vec<ReconSummaryRow> {
    let mut cells: BTreeMap<(String, u64), Vec<&ReconRow>> = BTreeMap::new();
    for r in rows {
        cells
            .entry((r.model.clone(), r.acceleration.to_bits()))
            .or_default()
            .push(r);
    }
    let mut out: Vec<ReconSummaryRow> = cells
        .into_iter()
        .map(|((model, a), cell)| ReconSummaryRow {
            config_hash: hash.to_string(),
            model,
            acceleration: f64::from_bits(a),
            n: cell.len(),
            ssim: median(&cell.iter().map(|r| r.ssim).collect::<Vec<_>>()),
            psnr: median(&cell.iter().map(|r| r.psnr).collect::<Vec<_>>()),
        })
        .collect();
    out.sort_by(|a, b| {
        a.model
            .cmp(&b.model)
            .then(a.acceleration.total_cmp(&b.acceleration))
    });
    out
}

/// Aggregates the stage CSVs into summary tables and SVG plots. Every input
/// is read and checked before anything is written.
pub fn report(cfg: &ExperimentConfig, out: &Path) -> Result<ReportOutput, HarnessError> {
    let splits = load_data(cfg, out)?;
    test_images(&splits)?;
    let whitebox = load_family(cfg, &whitebox_csv(out), "attack")?;
    let transfer = load_family(cfg, &transfer_csv(out), "transfer")?;
    let recon = load_reconstruct(cfg, out)?;
    if whitebox.is_none() && transfer.is_none() && recon.is_empty() {
        return Err(HarnessError::Dependency {
            artifact: transfer_csv(out),
            stage: "transfer",
        });
    }
    let families: Vec<(&str, Vec<AttackRow>)> = [("whitebox", whitebox), ("transfer", transfer)]
        .into_iter()
        .filter_map(|(f, rows)| rows.map(|r| (f, r)))
        .filter(|(_, rows)| !rows.is_empty())
        .collect();
    if families.is_empty() && recon.is_empty() {
        return Err(HarnessError::EmptyInput(
            "every result table is empty".into(),
        ));
    }

    let hash = cfg.hash();
    let dir = report_dir(out);
    reset_dir(&dir)?;
    let mut output = ReportOutput::default();
    for (family, rows) in &families {
        let summary = summarize(&hash, family, rows);
        for (name, y_label, metric) in ATTACK_PLOTS {
            let svg = line_plot(
                &format!("{family}: {name} vs epsilon"),
                "epsilon",
                y_label,
                &pair_series(&summary, metric),
            );
            let file = format!("{family}_{name}.svg");
            write_text(&dir.join(&file), &svg)?;
            output.files.push(Path::new("report").join(file));
        }
        output.summary.extend(summary);
    }
    if !output.summary.is_empty() {
        write_csv(&dir.join("summary.csv"), &output.summary)?;
        output.files.push(Path::new("report").join("summary.csv"));
    }
    if !recon.is_empty() {
        output.reconstruct = summarize_reconstruct(&hash, &recon);
        write_csv(&dir.join("reconstruct_summary.csv"), &output.reconstruct)?;
        output
            .files
            .push(Path::new("report").join("reconstruct_summary.csv"));
        for (name, y_label, metric) in [
            (
                "ssim",
                "median SSIM",
                (|r: &ReconSummaryRow| r.ssim) as fn(&ReconSummaryRow) -> f64,
            ),
            ("psnr", "median pSNR (dB)", |r| r.psnr),
        ] {
            let mut by_model: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
            for r in &output.reconstruct {
                by_model
                    .entry(&r.model)
                    .or_default()
                    .push((r.acceleration, metric(r)));
            }
            let series: Vec<Series> = by_model
                .into_iter()
                .map(|(m, points)| Series {
                    label: m.to_string(),
                    points,
                })
                .collect();
            let svg = line_plot(
                &format!("clean {name} vs acceleration"),
                "acceleration",
                y_label,
                &series,
            );
            let file = format!("reconstruct_{name}.svg");
            write_text(&dir.join(&file), &svg)?;
            output.files.push(Path::new("report").join(file));
        }
    }
    let meta = serde_json::json!({
        "config_hash": hash,
        "sampler_n_scales": cfg.models.diffusion.as_ref().map(|d| d.schedule.n_scales),
        "attack_iters": cfg.attack.iters,
        "families": families.iter().map(|(f, _)| *f).collect::<Vec<_>>(),
        "files": output.files,
    });
    write_json(&dir.join("report.json"), &meta)?;
    output.files.push(Path::new("report").join("report.json"));
    info!("report: {} files in {}", output.files.len(), dir.display());
    Ok(output)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Outcome of a full pipeline run. Everything except `timings` is a pure
/// function of the config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub timings: Vec<StageTiming>,
    /// Files written, relative to the output directory.
    pub artifacts: Vec<PathBuf>,
    pub reconstruct: Vec<ReconRow>,
    pub whitebox: Vec<AttackRow>,
    pub transfer: Vec<AttackRow>,
}

/// Every resolved seed, keyed by config path.
pub fn seeds(cfg: &ExperimentConfig) -> BTreeMap<String, u64> {
    let mut out = BTreeMap::new();
    let mut put = |k: &str, v: Option<u64>| {
        if let Some(v) = v {
            out.insert(k.to_string(), v);
        }
    };
    put("seed", Some(cfg.seed));
    put("dataset.seed", cfg.dataset.seed);
    put("mask.seed", cfg.mask.seed);
    if let Some(d) = &cfg.models.denoiser {
        put("models.denoiser.init_seed", d.init_seed);
        put("models.denoiser.train.seed", d.train.seed);
    }
    if let Some(u) = &cfg.models.unrolled {
        put("models.unrolled.init_seed", u.init_seed);
        put("models.unrolled.train.seed", u.train.seed);
    }
    if let Some(s) = &cfg.models.diffusion {
        put("models.diffusion.init_seed", s.init_seed);
        put("models.diffusion.train.seed", s.train.seed);
        put("models.diffusion.sampler.seed", s.sampler.seed);
    }
    put("attack.seed", cfg.attack.seed);
    out
}

fn list_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), HarnessError> {
    let entries = fs::read_dir(dir).map_err(|e| HarnessError::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| HarnessError::io(dir, e))?.path();
        if path.is_dir() {
            list_files(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

fn timed<T>(
    timings: &mut Vec<StageTiming>,
    stage: &'static str,
    f: impl FnOnce() -> Result<T, HarnessError>,
) -> Result<T, HarnessError> {
    let start = Instant::now();
    let value = f().map_err(|e| e.in_stage(stage))?;
    timings.push(StageTiming {
        stage: stage.to_string(),
        seconds: start.elapsed().as_secs_f64(),
    });
    Ok(value)
}

/// Runs every stage in order. The transfer matrix is computed once; its
/// diagonal is the white-box table.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<RunRecord, HarnessError> {
    let mut timings = Vec::new();
    write_config(cfg, out)?;
    timed(&mut timings, "phantom", || phantom(cfg, out))?;
    timed(&mut timings, "train", || train(cfg, out))?;
    let reconstruct_rows = timed(&mut timings, "reconstruct", || reconstruct(cfg, out))?;
    let transfer_rows = timed(&mut timings, "transfer", || transfer(cfg, out))?;
    let whitebox_rows: Vec<AttackRow> = transfer_rows
        .iter()
        .filter(|r| r.source == r.target)
        .cloned()
        .collect();
    write_csv(&whitebox_csv(out), &whitebox_rows)?;
    timed(&mut timings, "report", || report(cfg, out))?;
    let mut artifacts = Vec::new();
    list_files(out, out, &mut artifacts)?;
    artifacts.retain(|p| p != Path::new(RUN_RECORD_FILE));
    artifacts.sort();
    let record = RunRecord {
        config_hash: cfg.hash(),
        seeds: seeds(cfg),
        timings,
        artifacts,
        reconstruct: reconstruct_rows,
        whitebox: whitebox_rows,
        transfer: transfer_rows,
    };
    write_json(&out.join(RUN_RECORD_FILE), &record)?;
    Ok(record)
}
