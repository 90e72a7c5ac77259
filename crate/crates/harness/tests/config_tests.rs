mod common;

use common::{set, tiny, tiny_json};
use mri_robust::phantom::PhantomKind;
use mri_robust_harness::config::{apply_env_overrides, from_value, load};
use mri_robust_harness::{ExperimentConfig, HarnessError};
use serde_json::json;

fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

#[test]
fn unknown_keys_are_all_listed() {
    let value = json!({"sed": 1, "attack": {"iters": 3, "epsilon_grid": [0.1]}, "models": {"denoiser": {"widht": 3}}});
    let err = from_value(value).unwrap_err();
    let msg = err.to_string();
    for key in ["sed", "attack.epsilon_grid", "models.denoiser.widht"] {
        assert!(msg.contains(key), "{msg}");
    }
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn defaults_apply_to_missing_keys() {
    let cfg = load(None, env(&[]), None).unwrap();
    assert_eq!(cfg.reconstruct.accelerations, vec![4.0, 8.0, 12.0]);
    assert_eq!(cfg.attack.epsilons, vec![0.005, 0.01, 0.02, 0.05, 0.1]);
    assert_eq!(cfg.dataset.count, 100);
    assert_eq!(
        cfg.models.diffusion.as_ref().unwrap().schedule.n_scales,
        1000
    );
}

#[test]
fn environment_overrides_nested_keys() {
    let vars = env(&[
        ("MRIROBUST_ATTACK__ITERS", "7"),
        ("MRIROBUST_DATASET__KIND", "shepp_logan"),
        ("MRIROBUST_MODELS__DIFFUSION", "null"),
        ("UNRELATED", "1"),
    ]);
    let cfg = load(None, vars, None).unwrap();
    assert_eq!(cfg.attack.iters, 7);
    assert_eq!(cfg.dataset.kind, PhantomKind::SheppLogan);
    assert!(cfg.models.diffusion.is_none());

    let err = load(None, env(&[("MRIROBUST_ATTACK__ITERZ", "7")]), None).unwrap_err();
    assert!(err.to_string().contains("attack.iterz"), "{err}");
    let mut v = json!({"seed": 1});
    assert!(apply_env_overrides(&mut v, env(&[("MRIROBUST_SEED__X", "1")])).is_err());
}

#[test]
fn seeds_are_explicit_and_reseedable() {
    let cfg = tiny();
    let d = cfg.models.denoiser.as_ref().unwrap();
    assert!(cfg.dataset.seed.is_some() && cfg.mask.seed.is_some() && cfg.attack.seed.is_some());
    assert!(d.init_seed.is_some() && d.train.seed.is_some());
    assert_ne!(cfg.dataset.seed, cfg.mask.seed);

    let pinned = common::config(set(tiny_json(), "mask.seed", json!(123)));
    assert_eq!(pinned.mask.seed, Some(123));
    assert_eq!(pinned.dataset.seed, cfg.dataset.seed);

    let mut other = cfg.clone();
    other.reseed(99);
    assert_eq!(other.seed, 99);
    assert_ne!(other.dataset.seed, cfg.dataset.seed);
    assert_ne!(other.hash(), cfg.hash());
    let mut again = other.clone();
    again.reseed(99);
    assert_eq!(again, other);
}

#[test]
fn hash_tracks_content_and_roundtrips() {
    let cfg = tiny();
    let text = serde_json::to_string_pretty(&cfg).unwrap();
    let back: ExperimentConfig = from_value(serde_json::from_str(&text).unwrap()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
    let mut changed = cfg.clone();
    changed.attack.iters += 1;
    assert_ne!(changed.hash(), cfg.hash());
    assert_eq!(cfg.hash().len(), 64);
}

#[test]
fn validation_rejects_bad_values() {
    let cases = [
        ("dataset.size", json!(24)),
        ("mask.acceleration", json!(0.5)),
        ("mask.center_fraction", json!(1.5)),
        ("attack.epsilons", json!([0.01, -0.1])),
        ("attack.sources", json!(["diffusion"])),
        ("models.denoiser.train.lr", json!(0.0)),
        ("models.diffusion.sampler.dc_lambda", json!(2.0)),
    ];
    for (path, value) in cases {
        let mut cfg = from_value(set(tiny_json(), path, value)).unwrap();
        cfg.resolve_seeds();
        let err = cfg.validate().unwrap_err();
        assert!(matches!(err, HarnessError::Config(_)), "{path}: {err}");
        assert_eq!(err.exit_code(), 2);
    }
    let disabled = set(
        set(tiny_json(), "models.unrolled", json!(null)),
        "attack.sources",
        json!(["unrolled"]),
    );
    let mut cfg = from_value(disabled).unwrap();
    cfg.resolve_seeds();
    assert!(cfg.validate().is_err());
}

#[test]
fn sources_default_to_trained_differentiable_models() {
    assert_eq!(tiny().sources(), vec!["denoiser", "unrolled"]);
    let only = common::config(set(
        tiny_json(),
        "attack.sources",
        json!(["zero_filled", "denoiser", "denoiser"]),
    ));
    assert_eq!(only.sources(), vec!["denoiser", "zero_filled"]);
}

#[test]
fn config_files_are_read_and_errors_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(&path, serde_json::to_string(&tiny_json()).unwrap()).unwrap();
    let cfg = load(Some(&path), env(&[]), None).unwrap();
    assert_eq!(cfg, tiny());
    assert_eq!(load(Some(&path), env(&[]), Some(5)).unwrap().seed, 5);
    std::fs::write(&path, "{not json").unwrap();
    assert_eq!(
        load(Some(&path), env(&[]), None).unwrap_err().exit_code(),
        2
    );
    assert_eq!(
        load(Some(&dir.path().join("missing.json")), env(&[]), None)
            .unwrap_err()
            .exit_code(),
        2
    );
}
