use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const SMALL: &str = r#"{
  "simulate": {"total_steps": 2500},
  "pipeline": {"surface": {"architecture": {"hidden": [16, 16]}, "adam": {"steps": 100}, "lbfgs": {"max_iter": 300}, "n_collocation": 64, "max_data_points": 400}},
  "prediction": {"window": 300, "n_samples": 200, "retrain": {"architecture": {"hidden": [16, 16]}, "adam": {"steps": 0}, "lbfgs": {"max_iter": 10}, "outer_rounds": 1, "n_collocation": 64, "max_data_points": 400}},
  "generation": {"n_paths": 5, "n_steps": 20}
}"#;

struct Env {
    dir: TempDir,
    config: PathBuf,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("config.json");
        std::fs::write(&config, SMALL).unwrap();
        Self { dir, config }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, out: &str, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_sindy-bsde"))
            .arg("--config")
            .arg(&self.config)
            .arg("--out")
            .arg(self.path(out))
            .args(args)
            .env_remove("SINDY_BSDE_SEED")
            .env_remove("SINDY_BSDE_CONFIG")
            .env_remove("SINDY_BSDE_OUT")
            .env_remove("SINDY_BSDE_SCALE")
            .output()
            .unwrap()
    }

    fn simulated(&self) -> PathBuf {
        let o = self.run("sim", &["simulate"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        self.path("sim/path.csv")
    }
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn discover_prints_the_equation_and_writes_the_law() {
    let env = Env::new();
    let input = env.simulated();
    let o = env.run("disc", &["discover", "--input", input.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    let law = json(&env.path("disc/bsde.json"));
    assert_eq!(stdout.trim(), law["equation"].as_str().unwrap());
    assert!(stdout.starts_with("dY = ["));
    for f in ["sigma.json", "increments.csv", "brownian.json", "surface.json", "manifest.json"] {
        assert!(env.path("disc").join(f).is_file(), "{f}");
    }

    // The saved surface reproduces the same law.
    let surface = env.path("disc/surface.json");
    let o = env.run("disc2", &["discover", "--input", input.to_str().unwrap(), "--surface", surface.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(String::from_utf8(o.stdout).unwrap(), stdout);
}

#[test]
fn predict_writes_log_and_summary() {
    let env = Env::new();
    let input = env.simulated();
    let o = env.run("pred", &["predict", "--input", input.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(env.path("pred/predictions.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "t,mean,lo,hi,realized,skip,retrained");
    // 2501 points, the last 500 held out.
    assert_eq!(log.lines().count(), 1 + 500);
    let summary = json(&env.path("pred/summary.json"));
    for key in ["rmse", "coverage", "n_skips", "config"] {
        assert!(summary.get(key).is_some(), "{key}");
    }
}

#[test]
fn generate_writes_one_file_per_path() {
    let env = Env::new();
    let input = env.simulated();
    let o = env.run("gen", &["generate", "--input", input.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let files: Vec<_> = std::fs::read_dir(env.path("gen/paths"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    assert_eq!(files.len(), 5);
    let first = std::fs::read_to_string(env.path("gen/paths/path_00000.csv")).unwrap();
    assert_eq!(first.lines().next().unwrap(), "t,x,y");
    assert_eq!(first.lines().count(), 1 + 21);
}

#[test]
fn manifest_echoes_config_versions_and_seeds() {
    let env = Env::new();
    let o = env.run("sim", &["--seed", "9", "simulate"]);
    assert!(o.status.success());
    let m = json(&env.path("sim/manifest.json"));
    assert_eq!(m["subcommand"], "simulate");
    assert_eq!(m["seed"], 9);
    assert_eq!(m["config"]["simulate"]["total_steps"], 2500);
    assert_eq!(m["config"]["pipeline"]["surface"]["seed"], 9);
    assert!(m["seeds"].as_object().unwrap().values().all(|v| v == 9));
    assert_eq!(m["version"], env!("CARGO_PKG_VERSION"));
    assert!(m["core_version"].is_string());
    assert!(m["timing"]["wall_seconds"].as_f64().unwrap() >= 0.0);
    assert_eq!(m["outputs"], serde_json::json!(["path.csv"]));
    assert_eq!(m["status"], "ok");
}

#[test]
fn manifest_config_replays_the_run() {
    let env = Env::new();
    assert!(env.run("a", &["--seed", "4", "simulate"]).status.success());
    let m = json(&env.path("a/manifest.json"));
    let replay = env.path("replay.json");
    std::fs::write(&replay, serde_json::to_string(&m["config"]).unwrap()).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_sindy-bsde"))
        .args(["--config", replay.to_str().unwrap(), "--out", env.path("b").to_str().unwrap(), "simulate"])
        .env_remove("SINDY_BSDE_SEED")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(std::fs::read(env.path("a/path.csv")).unwrap(), std::fs::read(env.path("b/path.csv")).unwrap());
}

#[test]
fn unknown_config_key_is_rejected_by_name() {
    let env = Env::new();
    let bad = env.path("bad.json");
    std::fs::write(&bad, r#"{"pipeline": {"surface": {"n_colocation": 10}}}"#).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_sindy-bsde"))
        .args(["--config", bad.to_str().unwrap(), "--out", env.path("x").to_str().unwrap(), "simulate"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains("n_colocation"), "{err}");
    assert!(!env.path("x/path.csv").exists());
}

#[test]
fn failure_categories_have_distinct_exit_codes() {
    let env = Env::new();
    let missing = env.run("m", &["fit", "--input", env.path("absent.csv").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(4));

    let broken = env.path("broken.csv");
    std::fs::write(&broken, "t,x,y\n0,1,abc\n").unwrap();
    let data = env.run("d", &["fit", "--input", broken.to_str().unwrap()]);
    assert_eq!(data.status.code(), Some(5));

    // A constant stock has no diffusion to identify.
    let flat = env.path("flat.csv");
    let rows: String = (0..200).map(|i| format!("{},1,0.1\n", i as f64 * 0.001)).collect();
    std::fs::write(&flat, format!("t,x,y\n{rows}")).unwrap();
    let model = env.run("f", &["discover", "--input", flat.to_str().unwrap()]);
    assert_eq!(model.status.code(), Some(6), "{}", String::from_utf8_lossy(&model.stderr));

    let usage = Command::new(env!("CARGO_BIN_EXE_sindy-bsde")).arg("frobnicate").output().unwrap();
    assert_eq!(usage.status.code(), Some(2));
}

#[test]
fn environment_overrides_the_seed() {
    let env = Env::new();
    let o = Command::new(env!("CARGO_BIN_EXE_sindy-bsde"))
        .args(["--config", env.config.to_str().unwrap(), "simulate"])
        .env("SINDY_BSDE_SEED", "11")
        .env("SINDY_BSDE_OUT", env.path("e"))
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(json(&env.path("e/manifest.json"))["seed"], 11);
}

#[test]
fn fixture_feeds_ingest() {
    let env = Env::new();
    assert!(env.run("fx", &["fixture"]).status.success());
    let follow = env.path("fx/run_config.json");
    let ticks = env.path("fx/ticks.csv");
    let o = Command::new(env!("CARGO_BIN_EXE_sindy-bsde"))
        .args(["--config", follow.to_str().unwrap(), "--out", env.path("ing").to_str().unwrap()])
        .args(["ingest", "--input", ticks.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let count = |f: &str| std::fs::read_to_string(env.path("ing").join(f)).unwrap().lines().count() - 1;
    assert_eq!(count("train.csv") + count("test.csv"), count("path.csv"));
}

#[test]
fn benchmark_rejects_an_unknown_scale() {
    let env = Env::new();
    let o = env.run("b", &["--scale", "laptop", "benchmark"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8(o.stderr).unwrap().contains("laptop"));
}
