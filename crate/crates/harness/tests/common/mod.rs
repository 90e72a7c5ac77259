#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use mri_robust_harness::config::from_value;
use mri_robust_harness::ExperimentConfig;
use serde_json::{json, Value};

/// A config small enough for a full pipeline run in a few seconds: 16x16
/// phantoms, tiny nets, a 5-level sampler and 3 attack steps.
pub fn tiny_json() -> Value {
    let net = json!({"hidden": 4, "depth": 3});
    let train = json!({"epochs": 2, "batch_size": 2});
    json!({
        "seed": 7,
        "dataset": {"size": 16, "count": 6, "train_fraction": 0.5, "count_range": [2, 4]},
        "mask": {"acceleration": 4.0, "center_fraction": 0.125},
        "models": {
            "cg": {"max_iters": 5},
            "denoiser": {"net": net, "train": train},
            "unrolled": {"net": net, "train": {"epochs": 1, "batch_size": 3}, "n_iters": 2},
            "diffusion": {"net": net, "train": train, "schedule": {"n_scales": 5}}
        },
        "reconstruct": {"accelerations": [2.0, 4.0, 8.0]},
        "attack": {"epsilons": [0.01, 0.05], "iters": 3, "items": 2}
    })
}

pub fn config(value: Value) -> ExperimentConfig {
    let mut cfg = from_value(value).unwrap();
    cfg.resolve_seeds();
    cfg.validate().unwrap();
    cfg
}

pub fn tiny() -> ExperimentConfig {
    config(tiny_json())
}

/// Sets `path` (dot separated) in a JSON tree.
pub fn set(mut value: Value, path: &str, new: Value) -> Value {
    let mut node = &mut value;
    let parts: Vec<&str> = path.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        node = node
            .as_object_mut()
            .unwrap()
            .entry(p.to_string())
            .or_insert(json!({}));
    }
    node.as_object_mut()
        .unwrap()
        .insert(parts[parts.len() - 1].to_string(), new);
    value
}

/// Every file under `root`, relative and sorted.
pub fn files(root: &Path) -> Vec<PathBuf> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    let mut out = Vec::new();
    if root.exists() {
        walk(root, root, &mut out);
    }
    out.sort();
    out
}

pub fn csv_files(root: &Path) -> Vec<PathBuf> {
    files(root)
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect()
}
