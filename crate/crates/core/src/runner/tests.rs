use super::cli::{resolve_config, Cli};
use super::*;
use crate::error::Error;
use clap::Parser;

#[test]
fn empty_config_takes_defaults() {
    let cfg = RunConfig::from_json("{}").unwrap();
    assert_eq!(cfg, RunConfig::default());
    assert_eq!(cfg.mask.s_max, 0.10);
    assert_eq!(cfg.mask.gamma, 0.7);
}

#[test]
fn invalid_values_name_their_key() {
    let err = RunConfig::from_json(r#"{"mask": {"delta": -1.0}}"#).unwrap_err();
    assert!(matches!(&err, Error::Config { key, .. } if key == "mask.delta"), "{err}");

    let err = RunConfig::from_json(r#"{"experiment": {"pruned_budget": 0.0}}"#).unwrap_err();
    assert!(matches!(&err, Error::Config { key, .. } if key == "experiment.pruned_budget"));

    let err = RunConfig::from_json(r#"{"model": {"vocab_size": 200}}"#).unwrap_err();
    assert!(matches!(&err, Error::Config { key, .. } if key == "model.vocab_size"));
}

#[test]
fn unknown_and_mistyped_keys_are_rejected() {
    let err = RunConfig::from_json(r#"{"mask": {"deltaa": 1.0}}"#).unwrap_err();
    assert!(matches!(&err, Error::Config { key, .. } if key.starts_with("mask")), "{err}");
    let err = RunConfig::from_json(r#"{"corpus": {"n_subjects": "many"}}"#).unwrap_err();
    assert!(matches!(&err, Error::Config { key, .. } if key == "corpus.n_subjects"), "{err}");
    assert!(RunConfig::from_json(r#"{"schema_version": 2}"#).is_err());
}

#[test]
fn config_round_trips() {
    let mut cfg = RunConfig::default().with_seed(42);
    cfg.experiment.gamma_selection = GammaSelection::Sweep;
    cfg.mask.epochs = 17;
    let back = RunConfig::from_json(&cfg.to_json()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.corpus.seed, 42);
    assert_eq!(back.mask.seed, 42);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(&path, r#"{"seed": 3}"#).unwrap();
    let cli = Cli::parse_from(["editlab", "--config", path.to_str().unwrap(), "--seed", "9", "gen-corpus"]);
    let cfg = resolve_config(&cli).unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.pretrain.seed, 9);
    let cli = Cli::parse_from(["editlab", "--config", path.to_str().unwrap(), "gen-corpus"]);
    assert_eq!(resolve_config(&cli).unwrap().seed, 3);
}

#[test]
fn manifest_appends_runs_and_hashes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::default();
    let mut rd = RunDir::create(dir.path()).unwrap();
    rd.write("metrics/a.json", b"{}\n").unwrap();
    rd.note("k", "v");
    let m = rd.finish("first", &cfg).unwrap();
    assert_eq!(m.artifacts.len(), 1);
    assert_eq!(m.artifacts[0].bytes, 3);
    let (sha, _) = sha256_file(&dir.path().join("metrics/a.json")).unwrap();
    assert_eq!(m.artifacts[0].sha256, sha);

    let mut rd = RunDir::create(dir.path()).unwrap();
    rd.note_input("metrics/a.json");
    rd.finish("second", &cfg).unwrap();
    let log: ManifestLog =
        serde_json::from_slice(&std::fs::read(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(log.runs.len(), 2);
    assert_eq!(log.runs[1].inputs[0].path, "metrics/a.json");
    assert!(!dir.path().join("manifest.json.tmp").exists());
}

#[test]
fn missing_inputs_point_at_the_producing_command() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::new(RunConfig::default(), RunDir::create(dir.path()).unwrap(), true);
    let err = p.pretrain().unwrap_err().to_string();
    assert!(err.contains("gen-corpus"), "{err}");
    let err = p.train_mask().unwrap_err().to_string();
    assert!(err.contains("edit rome"), "{err}");
}
