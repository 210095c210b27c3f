use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use leaky::tower::{markov_matrix_oracle, MarkovMap};
use serde_json::Value;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn leaky(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_leaky"));
    cmd.args(args).env_remove("LEAKY_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn run_in(sub: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![sub, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    leaky(&args, &[])
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn small_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, body).unwrap();
    p
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .filter(|(n, _)| n != "config.json")
        .collect();
    v.sort();
    v
}

#[test]
fn overlapping_disks_fail_with_code() {
    let out = tempfile::tempdir().unwrap();
    let o = run_in("validate-geometry", &configs().join("overlap.json"), out.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("geometry.overlap"));
}

#[test]
fn golden_tower_eigenvalue_matches_oracle() {
    let out = tempfile::tempdir().unwrap();
    let o = run_in("tower-eig", &configs().join("tower_eig.json"), out.path(), &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let j = read_json(&out.path().join("tower_eig.json"));
    let oracle = markov_matrix_oracle(&MarkovMap::doubling(4), &[0]).unwrap();
    assert!((j["theta"].as_f64().unwrap() - oracle.theta).abs() < 1e-8);
    assert!((j["theta"].as_f64().unwrap() - (1.0 + 5f64.sqrt()) / 4.0).abs() < 1e-8);
    assert_eq!(j["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(j["seed"], 0);
}

#[test]
fn tower_bound_reports_tail() {
    let out = tempfile::tempdir().unwrap();
    let o = run_in("tower-bound", &configs().join("tower_eig.json"), out.path(), &[]);
    assert!(o.status.success());
    let j = read_json(&out.path().join("tower_bound.json"));
    // the golden hole sits in the base, where the bound says nothing
    assert_eq!(j["bound_applicable"], false);
    assert_eq!(j["bound_holds"], true);
    assert!(j["tail"]["ok"].as_bool().unwrap());
}

#[test]
fn escape_rate_end_to_end() {
    let out = tempfile::tempdir().unwrap();
    let cfg = small_config(out.path(), r#"{"N": 20000, "n_max": 20, "window": [5, 20], "seed": 9}"#);
    let o = run_in("escape-rate", &cfg, out.path(), &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let j = read_json(&out.path().join("results.json"));
    let theta = j["theta_hat"].as_f64().unwrap();
    assert!(theta > 0.8 && theta < 1.0, "{theta}");
    assert_eq!(j["window"], serde_json::json!([5, 20]));
    assert_eq!(j["seed"], 9);
    let counts = fs::read_to_string(out.path().join(j["counts_csv_path"].as_str().unwrap())).unwrap();
    assert!(counts.starts_with("n,survivors,escaped,censored\n"));
    assert_eq!(counts.lines().count(), 22);
    let log = fs::read_to_string(out.path().join("run.log")).unwrap();
    assert!(log.contains("censored="));
}

#[test]
fn seed_flag_overrides_config() {
    let out = tempfile::tempdir().unwrap();
    let cfg = small_config(out.path(), r#"{"N": 5000, "n_max": 10, "window": [2, 10], "seed": 9}"#);
    assert!(run_in("escape-rate", &cfg, out.path(), &["--seed", "11"]).status.success());
    let j = read_json(&out.path().join("results.json"));
    assert_eq!(j["seed"], 11);
}

#[test]
fn every_subcommand_is_thread_count_independent() {
    let cases = [
        ("validate-geometry", r#"{"N": 1000}"#),
        ("simulate", r#"{"N": 3000, "n_max": 8, "grid": [8, 8], "seed": 2}"#),
        ("escape-rate", r#"{"N": 3000, "n_max": 8, "window": [2, 8], "estimator": "fleming_viot", "seed": 2}"#),
        ("survivor-measure", r#"{"N": 3000, "n_max": 8, "window": [2, 8], "grid": [8, 8], "seed": 2}"#),
        (
            "small-hole-sweep",
            r#"{"N": 2000, "n_max": 6, "window": [2, 6], "grid": [8, 8], "sweep": {"type": "II", "anchor": [0.5, 0.0], "h": [0.04, 0.02]}}"#,
        ),
        ("singularity-diag", r#"{"N": 2000, "k_max": 20}"#),
    ];
    for (sub, body) in cases {
        let mut runs = Vec::new();
        // the repeated 8 checks plain reruns
        for threads in ["1", "4", "8", "8"] {
            let out = tempfile::tempdir().unwrap();
            let cfg = small_config(out.path(), body);
            let o = run_in(sub, &cfg, out.path(), &["--threads", threads]);
            assert!(o.status.success(), "{sub}: {}", String::from_utf8_lossy(&o.stderr));
            runs.push(files(out.path()));
        }
        assert!(runs[0].len() >= 2, "{sub}");
        for r in &runs[1..] {
            assert_eq!(r, &runs[0], "{sub}");
        }
    }
}

#[test]
fn env_thread_count_is_used_and_checked() {
    let out = tempfile::tempdir().unwrap();
    let cfg = configs().join("tower_eig.json");
    let args = ["tower-eig", "--config", cfg.to_str().unwrap(), "--out", out.path().to_str().unwrap()];
    assert!(leaky(&args, &[("LEAKY_THREADS", "2")]).status.success());
    let o = leaky(&args, &[("LEAKY_THREADS", "many")]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_output_directory_is_io_error() {
    let out = tempfile::tempdir().unwrap();
    let o = run_in("tower-eig", &configs().join("tower_eig.json"), &out.path().join("absent"), &[]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error[io]"));
    let o = run_in("tower-eig", &out.path().join("no_config.json"), out.path(), &[]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn numeric_failure_exits_with_three() {
    let out = tempfile::tempdir().unwrap();
    let cfg = small_config(out.path(), r#"{"N": 50, "n_max": 20, "window": [5, 20]}"#);
    assert_eq!(run_in("escape-rate", &cfg, out.path(), &[]).status.code(), Some(3));
}
