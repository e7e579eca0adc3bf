use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn load(name: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(scenarios().join(name)).unwrap()).unwrap()
}

/// A shortened testbed so each run takes well under a second.
fn small_smpc() -> Value {
    let mut v = load("smpc_testbed.json");
    v["smpc"]["runs"] = json!(4);
    v["smpc"]["steps"] = json!(6);
    v
}

struct Run {
    code: i32,
    stderr: String,
    out: tempfile::TempDir,
}

fn run_with(mode: &str, cfg: &Value, extra: &[&str], env: &[(&str, &str)]) -> Run {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("config.json");
    std::fs::write(&cfg_path, serde_json::to_string(cfg).unwrap()).unwrap();
    let out = tempfile::tempdir().unwrap();
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_polychaos"));
    cmd.args([mode, "--quiet", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(out.path())
        .args(extra)
        .env_remove("POLYCHAOS_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    let Output { status, stderr, .. } = cmd.output().unwrap();
    Run {
        code: status.code().unwrap(),
        stderr: String::from_utf8(stderr).unwrap(),
        out,
    }
}

fn error_json(r: &Run) -> Value {
    serde_json::from_str(r.stderr.trim()).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {}", r.stderr))
}

#[test]
fn propagate_success_and_config_error() {
    let r = run_with("propagate", &load("decay.json"), &["--mc-samples", "2000"], &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.out.path().join("pce_moments.csv").exists());
    assert!(r.out.path().join("mc_moments.csv").exists());

    let mut bad = load("decay.json");
    bad["chance"] = json!({ "beta": 1.3 });
    bad["degree"] = json!("six");
    let r = run_with("propagate", &bad, &[], &[]);
    assert_eq!(r.code, 1);
    let err = error_json(&r);
    assert_eq!(err["error"]["kind"], "config");
    let ptrs: Vec<&str> = err["error"]["violations"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v["pointer"].as_str().unwrap())
        .collect();
    assert!(ptrs.contains(&"/chance/beta") && ptrs.contains(&"/degree"), "{ptrs:?}");
}

#[test]
fn compare_writes_report() {
    let r = run_with(
        "compare",
        &load("compare_oscillator.json"),
        &["--mc-samples", "5000"],
        &[],
    );
    assert_eq!(r.code, 0, "{}", r.stderr);
    let csv = std::fs::read_to_string(r.out.path().join("compare.csv")).unwrap();
    assert!(csv.starts_with("time,output,pce_mean,mc_mean,mean_deviation,mean_stderr"));
    // 21 times, 2 outputs
    assert_eq!(csv.lines().count(), 1 + 21 * 2);
    let summary: Value =
        serde_json::from_str(&std::fs::read_to_string(r.out.path().join("summary.json")).unwrap()).unwrap();
    assert!(
        summary["results"]["comparison"]["max_mean_deviation_in_stderr"]
            .as_f64()
            .unwrap()
            < 4.0
    );
}

#[test]
fn smpc_success_and_infeasible_start() {
    let r = run_with("smpc", &small_smpc(), &[], &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let trace = std::fs::read_to_string(r.out.path().join("trace.csv")).unwrap();
    assert!(trace.starts_with("run,step,u0,x0,x1,violated,stage_cost,status,iterations,fallback\n"));
    assert_eq!(trace.lines().count(), 1 + 4 * 6);

    let mut infeasible = small_smpc();
    infeasible["smpc"]["x0"] = json!([0.0, -5.0]);
    let r = run_with("smpc", &infeasible, &[], &[]);
    assert_eq!(r.code, 2, "{}", r.stderr);
    assert_eq!(error_json(&r)["error"]["kind"], "infeasible");
}

#[test]
fn estimate_success_and_runtime_error() {
    let r = run_with("estimate", &load("estimate_gaussian.json"), &[], &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let trace = std::fs::read_to_string(r.out.path().join("filter_trace.csv")).unwrap();
    assert!(trace.starts_with("step,y,posterior_mean,posterior_variance,ess\n"));

    // a measurement hundreds of noise widths away leaves no usable weight
    let mut collapse = load("estimate_gaussian.json");
    let est = collapse["estimate"].as_object_mut().unwrap();
    est.remove("truth");
    est.remove("steps");
    est.insert("measurements".into(), json!([1000.0]));
    est.insert("noise_std".into(), json!(1e-3));
    let r = run_with("estimate", &collapse, &[], &[]);
    assert_eq!(r.code, 1, "{}", r.stderr);
    assert_eq!(error_json(&r)["error"]["kind"], "runtime");
}

#[test]
fn usage_errors_exit_one() {
    let r = run_with("smpc", &load("decay.json"), &[], &[]);
    assert_eq!(r.code, 1);
    assert_eq!(error_json(&r)["error"]["kind"], "usage");

    let r = run_with("propagate", &load("decay.json"), &[], &[("POLYCHAOS_THREADS", "zero")]);
    assert_eq!(r.code, 1);
    assert_eq!(error_json(&r)["error"]["kind"], "usage");
}

#[test]
fn overrides_change_results_deterministically() {
    let cfg = load("decay.json");
    let a = run_with(
        "propagate",
        &cfg,
        &["--mc-samples", "3000", "--seed", "1"],
        &[("POLYCHAOS_THREADS", "1")],
    );
    let b = run_with(
        "propagate",
        &cfg,
        &["--mc-samples", "3000", "--seed", "1"],
        &[("POLYCHAOS_THREADS", "3")],
    );
    let c = run_with(
        "propagate",
        &cfg,
        &["--mc-samples", "3000", "--seed", "2"],
        &[("POLYCHAOS_THREADS", "1")],
    );
    let read = |r: &Run, f: &str| std::fs::read(r.out.path().join(f)).unwrap();
    for f in ["pce_moments.csv", "mc_moments.csv", "summary.json"] {
        assert_eq!(read(&a, f), read(&b, f), "{f}");
    }
    assert_ne!(read(&a, "mc_moments.csv"), read(&c, "mc_moments.csv"));
    let smpc_a = run_with("smpc", &small_smpc(), &[], &[("POLYCHAOS_THREADS", "1")]);
    let smpc_b = run_with("smpc", &small_smpc(), &[], &[("POLYCHAOS_THREADS", "4")]);
    assert_eq!(read(&smpc_a, "trace.csv"), read(&smpc_b, "trace.csv"));
    assert_eq!(read(&smpc_a, "summary.json"), read(&smpc_b, "summary.json"));
}
