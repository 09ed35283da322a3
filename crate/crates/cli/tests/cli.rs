use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use probefield::model::read_map;
use probefield::oracle::read_dataset;

const SCENE: &str = r#"{"units":"m","extent":{"min":[-10,-10,0],"max":[10,10,6]},
  "primitives":[{"type":"box","min":[-2,-2,0],"max":[2,2,3]}]}"#;

const MICRO: &str = r#"{"n":2,"k":2,"encoder_widths":[8],"point_feature_dim":8,"d_model":8,"heads":2,
  "pe_frequencies":2,"decoder_layers":2,"decoder_width":8,"point_density":0.15,"probe_spacing":8.0}"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_probefield"));
    c.env_remove("RPN_SEED").env("RUST_LOG", "warn");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Scene, micro model config, and a 6-transmitter dataset in a fresh dir.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("box.json"), SCENE).unwrap();
    std::fs::write(dir.path().join("micro.json"), MICRO).unwrap();
    ok(
        dir.path(),
        &["dataset", "--scene", "box.json", "--tx-count", "6", "--tx-height", "3,5", "--patterns", "0",
          "--rx-grid", "4x4x1", "--seed", "2", "--out", "d.rpnd"],
    );
    dir
}

const TRAIN: &[&str] = &[
    "train", "--data", "d.rpnd", "--model-config", "micro.json", "--epochs", "3", "--lr", "1e-3",
    "--batch-size", "8", "--patience", "0",
];

fn train_to(dir: &Path, out: &str, extra: &[&str]) {
    let mut args = TRAIN.to_vec();
    args.extend(["--out", out]);
    args.extend(extra);
    ok(dir, &args);
}

fn manifest(path: PathBuf) -> serde_json::Value {
    let mut s = path.into_os_string();
    s.push(".manifest.json");
    serde_json::from_str(&std::fs::read_to_string(s).unwrap()).unwrap()
}

#[test]
fn dataset_counts_defaults_and_manifest() {
    let dir = workspace();
    let ds = read_dataset(&dir.path().join("d.rpnd")).unwrap();
    assert_eq!(ds.records.len(), 6 * 16);
    assert_eq!(ds.header.frequency_hz, 2.14e9);
    assert_eq!(ds.header.max_reflection_order, 2);
    assert!(!ds.header.diffraction_enabled);
    let m = manifest(dir.path().join("d.rpnd"));
    assert_eq!(m["command"], "dataset");
    assert_eq!(m["seed"], 2);
    assert_eq!(m["args"]["tx-count"], 6);
    assert_eq!(m["outputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn dataset_size_follows_the_layout() {
    let dir = workspace();
    ok(dir.path(), &["dataset", "--scene", "box.json", "--tx-count", "3", "--rx-grid", "5x4x2", "--rx-heights", "1.5,2.5", "--out", "e.rpnd"]);
    let ds = read_dataset(&dir.path().join("e.rpnd")).unwrap();
    assert_eq!(ds.records.len(), 3 * 2 * 40);
    assert_eq!(ds.header.rx_dims, [5, 4, 2]);
}

#[test]
fn missing_scene_is_an_io_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["dataset", "--scene", "nowhere/box.json", "--out", "d.rpnd"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere/box.json"));
}

#[test]
fn invalid_inputs_exit_with_validation_code() {
    let dir = workspace();
    for args in [
        &["dataset", "--scene", "box.json", "--rx-grid", "4x4", "--out", "x.rpnd"][..],
        &["dataset", "--scene", "box.json", "--rx-grid", "4x4x2", "--out", "x.rpnd"],
        &["dataset", "--scene", "box.json", "--patterns", "7", "--out", "x.rpnd"],
        &["dataset", "--scene", "box.json", "--freq", "-1", "--out", "x.rpnd"],
        &["train", "--data", "d.rpnd", "--lr", "0", "--out", "m.rpnc"],
        &["train", "--out", "m.rpnc"],
    ] {
        let out = run(dir.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn training_is_reproducible_and_eval_matches_the_log() {
    let dir = workspace();
    let p = dir.path();
    train_to(p, "a.rpnc", &["--seed", "7"]);
    train_to(p, "b.rpnc", &["--seed", "7"]);
    let a = std::fs::read(p.join("a.rpnc")).unwrap();
    assert_eq!(a, std::fs::read(p.join("b.rpnc")).unwrap());
    train_to(p, "c.rpnc", &["--seed", "8"]);
    assert_ne!(a, std::fs::read(p.join("c.rpnc")).unwrap());

    let history = std::fs::read_to_string(p.join("a.rpnc.history.jsonl")).unwrap();
    let best = history
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["val_mse"].as_f64().unwrap())
        .fold(f64::INFINITY, f64::min);
    assert_eq!(history.lines().count(), 3);
    ok(p, &["eval", "--model", "a.rpnc", "--data", "d.rpnd"]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("a.rpnc.eval.json")).unwrap()).unwrap();
    assert!((report["mse"].as_f64().unwrap() - best).abs() <= 1e-9);
    assert!(p.join("a.rpnc.eval.json.manifest.json").exists());
}

#[test]
fn manifest_replays_the_run() {
    let dir = workspace();
    let p = dir.path();
    train_to(p, "a.rpnc", &["--seed", "4"]);
    let original = std::fs::read(p.join("a.rpnc")).unwrap();
    std::fs::rename(p.join("a.rpnc.manifest.json"), p.join("run.json")).unwrap();
    std::fs::remove_file(p.join("a.rpnc")).unwrap();
    ok(p, &["train", "--config", "run.json"]);
    assert_eq!(std::fs::read(p.join("a.rpnc")).unwrap(), original);
    // A manifest for one command cannot drive another.
    assert_eq!(run(p, &["eval", "--config", "run.json"]).status.code(), Some(2));
}

#[test]
fn flags_override_config_and_seed_falls_back_to_env() {
    let dir = workspace();
    let p = dir.path();
    std::fs::write(
        p.join("cfg.json"),
        r#"{"scene":"box.json","tx_count":6,"tx-height":[3,5],"patterns":[0],"rx-grid":"4x4x1","seed":9,"out":"x.rpnd"}"#,
    )
    .unwrap();
    ok(p, &["dataset", "--config", "cfg.json", "--seed", "2", "--out", "y.rpnd"]);
    assert_eq!(std::fs::read(p.join("y.rpnd")).unwrap(), std::fs::read(p.join("d.rpnd")).unwrap());

    let base = ["dataset", "--scene", "box.json", "--tx-count", "6", "--tx-height", "3,5", "--patterns", "0", "--rx-grid", "4x4x1"];
    let out = bin().current_dir(p).args(base).args(["--out", "z.rpnd"]).env("RPN_SEED", "2").output().unwrap();
    assert!(out.status.success());
    assert_eq!(std::fs::read(p.join("z.rpnd")).unwrap(), std::fs::read(p.join("d.rpnd")).unwrap());
    // An explicit flag beats the environment.
    let out = bin().current_dir(p).args(base).args(["--seed", "5", "--out", "w.rpnd"]).env("RPN_SEED", "2").output().unwrap();
    assert!(out.status.success());
    assert_ne!(std::fs::read(p.join("w.rpnd")).unwrap(), std::fs::read(p.join("d.rpnd")).unwrap());
}

#[test]
fn intermediate_checkpoints_follow_the_interval() {
    let dir = workspace();
    train_to(dir.path(), "m.rpnc", &["--checkpoint-interval", "2"]);
    assert!(dir.path().join("m.rpnc.epoch2.rpnc").exists());
    assert!(!dir.path().join("m.rpnc.epoch3.rpnc").exists());
    let m = manifest(dir.path().join("m.rpnc"));
    assert_eq!(m["outputs"].as_array().unwrap().len(), 3);
}

#[test]
fn predict_writes_map_and_pgm() {
    let dir = workspace();
    let p = dir.path();
    train_to(p, "m.rpnc", &[]);
    ok(p, &["predict", "--model", "m.rpnc", "--tx", "-6,4,4.5", "--pattern", "0", "--height", "1.5", "--res", "16", "--out", "map.rpnm", "--pgm", "map.pgm"]);
    let map = read_map(&p.join("map.rpnm")).unwrap();
    assert_eq!(map.header.resolution, 16);
    assert_eq!(map.values.len(), 256);
    assert!(map.values.iter().all(|v| *v > 0.0 && *v < 1.0));
    let pgm = std::fs::read(p.join("map.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n16 16\n255\n"));
    assert_eq!(pgm.len(), b"P5\n16 16\n255\n".len() + 256);

    let out = run(p, &["predict", "--model", "m.rpnc", "--tx", "0,0", "--res", "16"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(p, &["predict", "--model", "m.rpnc", "--tx", "-6,4,4.5", "--height", "50"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let dir = workspace();
    let p = dir.path();
    train_to(p, "m.rpnc", &[]);
    let bytes = std::fs::read(p.join("m.rpnc")).unwrap();
    std::fs::write(p.join("bad.rpnc"), &bytes[..bytes.len() / 2]).unwrap();
    let out = run(p, &["eval", "--model", "bad.rpnc", "--data", "d.rpnd"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(p, &["eval", "--model", "missing.rpnc", "--data", "d.rpnd"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn baseline_and_ablation_reports() {
    let dir = workspace();
    let p = dir.path();
    ok(p, &["baseline", "--data", "d.rpnd", "--epochs", "2", "--batch-size", "16", "--out", "base.json"]);
    let base: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p.join("base.json")).unwrap()).unwrap();
    assert_eq!(base["history"].as_array().unwrap().len(), 2);
    assert!(base["metrics"]["mse"].as_f64().unwrap() >= 0.0);

    ok(p, &["ablate", "--data", "d.rpnd", "--model-config", "micro.json", "--epochs", "1", "--seeds", "0,1", "--out", "abl.json"]);
    let abl: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p.join("abl.json")).unwrap()).unwrap();
    assert_eq!(abl["seeds"], serde_json::json!([0, 1]));
    assert!(abl["full_param_count"].as_u64().unwrap() > abl["no_probes_param_count"].as_u64().unwrap());
}

#[test]
fn gradcheck_passes_and_fails_on_an_impossible_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &["gradcheck"]);
    assert!(stdout.contains("parameter arrays checked"));
    assert!(dir.path().join("gradcheck.json.manifest.json").exists());
    let out = run(dir.path(), &["gradcheck", "--tolerance", "0", "--out", "g.json"]);
    assert_eq!(out.status.code(), Some(4));
}
