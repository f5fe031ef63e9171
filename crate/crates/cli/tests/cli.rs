use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn mixdens(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixdens"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run mixdens")
}

fn ok(args: &[&str]) {
    let out = mixdens(args);
    assert!(
        out.status.success(),
        "mixdens {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn p(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).display().to_string()
}

#[test]
fn simulate_writes_n_rows_and_manifest() {
    let t = TempDir::new().unwrap();
    let out = p(&t, "sim");
    ok(&["simulate", "--model", "gmm", "--n", "1000", "--seed", "1", "--out-dir", &out]);
    let y = fs::read_to_string(t.path().join("sim/y.csv")).unwrap();
    assert_eq!(y.lines().count(), 1001);
    let theta = fs::read_to_string(t.path().join("sim/theta.csv")).unwrap();
    assert_eq!(theta.lines().count(), 1001);
    let m = json(&t.path().join("sim/manifest.json"));
    assert_eq!(m["command"], "simulate");
    assert_eq!(m["seed"], 1);
    for f in ["y.csv", "theta.csv", "prior.csv"] {
        assert_eq!(m["outputs"][f].as_str().unwrap().len(), 64, "{f}");
    }
    assert!(m["phases"].as_array().unwrap().iter().any(|p| p["name"] == "simulate"));
}

#[test]
fn simulate_same_seed_same_hashes() {
    let t = TempDir::new().unwrap();
    for d in ["a", "b"] {
        ok(&["simulate", "--model", "gamm", "--n", "300", "--seed", "4", "--out-dir", &p(&t, d)]);
    }
    let a = json(&t.path().join("a/manifest.json"));
    let b = json(&t.path().join("b/manifest.json"));
    assert_eq!(a["outputs"], b["outputs"]);
    ok(&["simulate", "--model", "gamm", "--n", "300", "--seed", "5", "--out-dir", &p(&t, "c")]);
    let c = json(&t.path().join("c/manifest.json"));
    assert_ne!(a["outputs"]["y.csv"], c["outputs"]["y.csv"]);
}

#[test]
fn large_poisson_simulation_has_integer_counts() {
    let t = TempDir::new().unwrap();
    ok(&["simulate", "--model", "pmm", "--n", "100000", "--out-dir", &p(&t, "s")]);
    let y = fs::read_to_string(t.path().join("s/y.csv")).unwrap();
    let rows: Vec<&str> = y.lines().skip(1).collect();
    assert_eq!(rows.len(), 100_000);
    assert!(rows.iter().all(|r| r.parse::<u64>().is_ok()));
}

#[test]
fn unknown_model_is_rejected() {
    let out = mixdens(&["simulate", "--model", "cauchy", "--n", "10"]);
    assert!(!out.status.success());
}

#[test]
fn npmle_fit_meets_certificate() {
    let t = TempDir::new().unwrap();
    ok(&["fit", "--method", "npmle", "--model", "gmm", "--n", "1000", "--out-dir", &p(&t, "f")]);
    let s = json(&t.path().join("f/fit.json"));
    assert!(s["optimality"].as_f64().unwrap() <= 1.001);
    let atoms = json(&t.path().join("f/atoms.json"));
    let w: f64 = atoms["weights"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
    assert!((w - 1.0).abs() < 1e-9);
}

#[test]
fn untrained_generator_fit_succeeds() {
    let t = TempDir::new().unwrap();
    let out = p(&t, "gb");
    ok(&["fit", "--method", "gb", "--epochs", "0", "--hidden", "16", "--model", "gmm", "--n", "200", "--out-dir", &out]);
    for f in ["checkpoint.json", "tau.json", "draws.csv", "loss.csv", "loglik.csv", "fit.json", "manifest.json"] {
        assert!(t.path().join("gb").join(f).is_file(), "{f}");
    }
    let loss = fs::read_to_string(t.path().join("gb/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1);
    let ck = json(&t.path().join("gb/checkpoint.json"));
    assert_eq!(ck["format"], "mixdens-generator");
    let draws = fs::read_to_string(t.path().join("gb/draws.csv")).unwrap();
    assert_eq!(draws.lines().count(), 1001);
}

#[test]
fn bootstrap_fit_writes_one_line_per_replicate() {
    let t = TempDir::new().unwrap();
    ok(&["fit", "--method", "boot", "--boot-B", "100", "--model", "pmm", "--n", "500", "--out-dir", &p(&t, "b")]);
    let e = fs::read_to_string(t.path().join("b/ensemble.jsonl")).unwrap();
    assert_eq!(e.lines().count(), 100);
    let first: Value = serde_json::from_str(e.lines().next().unwrap()).unwrap();
    assert!(first["atoms"].is_array() && first["optimality"].is_number());
}

#[test]
fn smoothed_fit_with_fixed_and_selected_bandwidth() {
    let t = TempDir::new().unwrap();
    ok(&["fit", "--method", "smooth", "--bandwidth", "0.7", "--model", "pmm", "--n", "300", "--out-dir", &p(&t, "h")]);
    assert_eq!(json(&t.path().join("h/fit.json"))["bandwidth"], 0.7);
    assert!(!t.path().join("h/bandwidth.json").exists());
    ok(&["fit", "--method", "smooth", "--bandwidth-cv", "--model", "pmm", "--n", "200", "--out-dir", &p(&t, "cv")]);
    let sel = json(&t.path().join("cv/bandwidth.json"));
    assert_eq!(sel["scores"].as_array().unwrap().len(), 25);
    let out = mixdens(&["fit", "--method", "smooth", "--bandwidth", "1", "--bandwidth-cv", "--model", "pmm"]);
    assert!(!out.status.success());
}

#[test]
fn fit_errors_exit_nonzero() {
    let t = TempDir::new().unwrap();
    let bad = t.path().join("bad.csv");
    fs::write(&bad, "y\n1\n-2\n").unwrap();
    let out = mixdens(&["fit", "--method", "npmle", "--data", bad.to_str().unwrap(), "--out-dir", &p(&t, "x")]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
    let out = mixdens(&["fit", "--model", "gmm", "--out-dir", &p(&t, "y")]);
    assert!(!out.status.success(), "method is required");
}

#[test]
fn eval_of_truth_against_itself_is_zero() {
    let t = TempDir::new().unwrap();
    ok(&["simulate", "--model", "gmm", "--n", "10", "--out-dir", &p(&t, "s")]);
    let prior = p(&t, "s/prior.csv");
    ok(&["eval", "--estimate", &prior, "--truth", &prior, "--out-dir", &p(&t, "e")]);
    let m = json(&t.path().join("e/metrics.json"));
    assert_eq!(m[0]["W1"], 0.0);
    assert_eq!(m[0]["ISE"], 0.0);
    ok(&["eval", "--estimate", &prior, "--model", "gmm", "--out-dir", &p(&t, "e2")]);
    let m = json(&t.path().join("e2/metrics.json"));
    assert!(m[0]["W1"].as_f64().unwrap() < 1e-3);
    assert!(m[0]["ISE"].as_f64().unwrap() < 1e-12);
}

#[test]
fn eval_writes_table_for_three_methods() {
    let t = TempDir::new().unwrap();
    let common = ["--model", "pmm", "--n", "300", "--seed", "2"];
    let mut fits = Vec::new();
    for (method, extra) in [("boot", vec!["--boot-B", "20"]), ("smooth", vec!["--bandwidth", "0.5"]), ("gb", vec!["--epochs", "5", "--hidden", "8"])] {
        let dir = p(&t, method);
        let mut args = vec!["fit", "--method", method, "--out-dir", &dir];
        args.extend(common);
        args.extend(extra);
        ok(&args);
        fits.push(dir);
    }
    let mut args = vec!["eval", "--out-dir"];
    let out = p(&t, "eval");
    args.push(&out);
    for f in &fits {
        args.extend(["--fit", f.as_str()]);
    }
    ok(&args);
    let table = fs::read_to_string(t.path().join("eval/table.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("method,model,n,replicates,w1_mean"));
    for m in ["boot,pmm,300", "smooth,pmm,300", "gb,pmm,300"] {
        assert!(lines.iter().any(|l| l.starts_with(m)), "{m}");
    }
    let metrics = json(&t.path().join("eval/metrics.json"));
    assert_eq!(metrics.as_array().unwrap().len(), 3);
    assert!(metrics[0].get("time_sec").is_none());
}

#[test]
fn eval_without_truth_fails() {
    let t = TempDir::new().unwrap();
    ok(&["fit", "--method", "npmle", "--data", "thailand", "--out-dir", &p(&t, "f")]);
    let out = mixdens(&["eval", "--fit", &p(&t, "f"), "--out-dir", &p(&t, "e")]);
    assert!(!out.status.success());
}

#[test]
fn named_datasets_resolve() {
    let t = TempDir::new().unwrap();
    for (name, n) in [("thailand", 602), ("mortality", 1096)] {
        ok(&["fit", "--method", "npmle", "--data", name, "--out-dir", &p(&t, name)]);
        let s = json(&t.path().join(name).join("fit.json"));
        assert_eq!(s["n"], n);
        assert_eq!(s["kernel"], "poisson");
    }
    let out = mixdens(&["fit", "--method", "npmle", "--data", "norberg", "--data-dir", &p(&t, "none"), "--out-dir", &p(&t, "nb")]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("norberg.csv"));
    let dir = t.path().join("own");
    fs::create_dir_all(&dir).unwrap();
    fs::write(dir.join("norberg.csv"), "y,freq\n0,5\n1,3\n4,1\n").unwrap();
    ok(&["fit", "--method", "npmle", "--data", "norberg", "--data-dir", dir.to_str().unwrap(), "--out-dir", &p(&t, "nb2")]);
    let s = json(&t.path().join("nb2/fit.json"));
    assert_eq!(s["n"], 9);
    let m = json(&t.path().join("nb2/manifest.json"));
    assert_eq!(m["inputs"].as_object().unwrap().len(), 2);
}

#[test]
fn lps_with_degenerate_data() {
    let t = TempDir::new().unwrap();
    let f = t.path().join("zeros.csv");
    fs::write(&f, "y,freq\n0,40\n").unwrap();
    ok(&["lps", "--data", f.to_str().unwrap(), "--method", "boot", "--boot-B", "10", "--folds", "4", "--out-dir", &p(&t, "l")]);
    let r = json(&t.path().join("l/lps.json"));
    // every refit puts its mass at θ ≈ 0, where P(y = 0) = 1
    assert!(r[0]["LPS"].as_f64().unwrap().abs() < 1e-2);
    assert_eq!(r[0]["per_fold"].as_array().unwrap().len(), 4);
    let out = mixdens(&["lps", "--data", f.to_str().unwrap(), "--method", "npmle", "--out-dir", &p(&t, "l2")]);
    assert!(!out.status.success());
}

#[test]
fn bench_single_cell_and_log_seconds() {
    let t = TempDir::new().unwrap();
    ok(&["bench", "--model", "pmm", "--n", "1000", "--method", "npmle", "--out-dir", &p(&t, "b")]);
    let csv = fs::read_to_string(t.path().join("b/timing.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    let cols: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(cols[4], "ok");
    let s: f64 = cols[5].parse().unwrap();
    let ls: f64 = cols[6].parse().unwrap();
    assert!((s.ln() - ls).abs() < 1e-12);
}

#[test]
fn bench_records_timeouts_and_continues() {
    let t = TempDir::new().unwrap();
    ok(&[
        "bench", "--model", "gmm", "--n", "1000", "--method", "boot,npmle", "--boot-B", "400", "--timeout", "0.05",
        "--out-dir", &p(&t, "b"),
    ]);
    let csv = fs::read_to_string(t.path().join("b/timing.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].contains(",timeout,"));
}

#[test]
fn sweep_grid_rows_and_empty_grid() {
    let t = TempDir::new().unwrap();
    ok(&[
        "sweep", "--model", "gmm", "--layers", "2", "--hidden", "4,8", "--epochs", "3", "--n", "100", "--out-dir",
        &p(&t, "s"),
    ]);
    let csv = fs::read_to_string(t.path().join("s/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let out = mixdens(&["sweep", "--model", "gmm", "--layers", "2", "--out-dir", &p(&t, "e")]);
    assert!(!out.status.success());
}

#[test]
fn config_file_fills_gaps_and_flags_win() {
    let t = TempDir::new().unwrap();
    let cfg = t.path().join("cfg.toml");
    fs::write(&cfg, "model = \"pmm\"\nn = [250]\nseed = 9\nmethod = [\"npmle\"]\n").unwrap();
    ok(&["fit", "--config", cfg.to_str().unwrap(), "--seed", "3", "--out-dir", &p(&t, "f")]);
    let s = json(&t.path().join("f/fit.json"));
    assert_eq!(s["n"], 250);
    assert_eq!(s["seed"], 3);
    assert_eq!(s["method"], "npmle");
    fs::write(&cfg, "bogus = 1\n").unwrap();
    assert!(!mixdens(&["fit", "--config", cfg.to_str().unwrap()]).status.success());
}

#[test]
fn rerun_from_manifest_reproduces_outputs() {
    let t = TempDir::new().unwrap();
    ok(&["fit", "--method", "boot", "--boot-B", "15", "--model", "gmm", "--n", "200", "--seed", "6", "--out-dir", &p(&t, "a")]);
    let manifest = p(&t, "a/manifest.json");
    ok(&["fit", "--config", &manifest, "--out-dir", &p(&t, "b")]);
    let a = json(&t.path().join("a/manifest.json"));
    let b = json(&t.path().join("b/manifest.json"));
    assert_eq!(a["outputs"], b["outputs"]);
}

#[test]
fn thread_count_from_environment() {
    let t = TempDir::new().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mixdens"))
        .args(["simulate", "--model", "bbm", "--n", "10", "--out-dir", &p(&t, "s")])
        .env("MIXDENS_THREADS", "3")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(json(&t.path().join("s/manifest.json"))["threads"], 3);
    ok(&["--threads", "2", "simulate", "--model", "bbm", "--n", "10", "--out-dir", &p(&t, "s2")]);
    assert_eq!(json(&t.path().join("s2/manifest.json"))["threads"], 2);
}
