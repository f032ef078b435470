//! End-to-end tests of the command-line driver: exit codes, JSON outputs,
//! stderr diagnostics, and rerun determinism, all exercised through the
//! compiled binary against the shipped scenario files.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_mflqg")
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

/// Fresh per-test output directory under the system temp dir.
fn out_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("mflqg-test-{tag}"));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn mflqg")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn check_zero_coupling_passes_with_h3_fields_populated() {
    let out = out_dir("check-zero");
    let sc = scenario("zero_coupling.json");
    let res = run(&[
        "check",
        "--scenario",
        sc.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(0));
    let doc = stdout_json(&res);
    assert_eq!(doc["assumptions"]["sa_ok"], true);
    assert_eq!(doc["assumptions"]["h1_ok"], true);
    assert_eq!(doc["assumptions"]["h2_ok"], true);
    // The smallness diagnostic must be populated even when the inequality
    // itself does not hold.
    assert!(doc["contraction"]["h3_lhs"].is_f64());
    assert!(doc["contraction"]["h3_rhs"].is_f64());
    assert!(doc["contraction"]["rho1"].is_f64());
    assert!(out.join("check.json").is_file());
    assert!(out.join("manifest.json").is_file());
}

#[test]
fn check_rejects_indefinite_control_weight() {
    // Flipping the sign of R violates the positivity assumption.
    let base: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(scenario("base.json")).unwrap()).unwrap();
    let mut bad = base;
    bad["minor"]["R"] = serde_json::json!(-0.9);
    let out = out_dir("check-bad-r");
    std::fs::create_dir_all(&out).unwrap();
    let path = out.join("bad.json");
    std::fs::write(&path, serde_json::to_string(&bad).unwrap()).unwrap();
    let res = run(&[
        "check",
        "--scenario",
        path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
    let doc = stdout_json(&res);
    assert_eq!(doc["assumptions"]["sa_ok"], false);
}

#[test]
fn cc_divergent_scenario_exits_with_factor_in_stderr() {
    let out = out_dir("cc-divergent");
    let sc = scenario("strong_coupling.json");
    let res = run(&[
        "cc",
        "--scenario",
        sc.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(3));
    let err: serde_json::Value =
        serde_json::from_slice(&res.stderr).expect("stderr is JSON on divergence");
    let factor = err["last_contraction_factor"]
        .as_f64()
        .expect("measured contraction factor");
    assert!(factor > 1.0, "divergence factor {factor} should exceed 1");
}

#[test]
fn cc_extreme_coupling_overflow_is_still_reported_as_divergence() {
    // Couplings scaled far past the contraction threshold overflow before
    // any factor is measurable; the run must still exit 3 with the factor
    // field present (null when unmeasured), never crash.
    let base: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(scenario("base.json")).unwrap()).unwrap();
    let mut hot = base;
    for key in ["F0", "Ftilde0", "H0"] {
        let v = hot["major"][key].as_f64().unwrap();
        hot["major"][key] = serde_json::json!(v * 100.0);
    }
    for key in ["F", "Ftilde", "Gtilde", "H", "Hhat"] {
        let v = hot["minor"][key].as_f64().unwrap();
        hot["minor"][key] = serde_json::json!(v * 100.0);
    }
    let out = out_dir("cc-extreme");
    std::fs::create_dir_all(&out).unwrap();
    let path = out.join("hot.json");
    std::fs::write(&path, serde_json::to_string(&hot).unwrap()).unwrap();
    let res = run(&[
        "cc",
        "--scenario",
        path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(3));
    let err: serde_json::Value =
        serde_json::from_slice(&res.stderr).expect("stderr is JSON on divergence");
    assert!(
        err.get("last_contraction_factor").is_some(),
        "factor field must be present"
    );
}

#[test]
fn cc_base_scenario_agrees_across_solvers() {
    let out = out_dir("cc-base");
    let sc = scenario("base.json");
    let res = run(&[
        "cc",
        "--scenario",
        sc.to_str().unwrap(),
        "--steps",
        "400",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(0));
    let doc = stdout_json(&res);
    assert!(doc["residual"].as_f64().unwrap() <= 1e-8);
    assert!(doc["agreement_K1"].as_f64().unwrap() <= 1e-6);
    assert!(doc["agreement_K2"].as_f64().unwrap() <= 1e-6);
    for name in [
        "cc_field_K1.csv",
        "cc_field_K2.csv",
        "cc_field_M1.csv",
        "cc_field_M2.csv",
        "cc_field_N1.csv",
        "cc_field_N2.csv",
    ] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
}

#[test]
fn oracle_both_cost_routes_agree_under_shared_noise() {
    let out = out_dir("oracle");
    let sc = scenario("base.json");
    let res = run(&[
        "oracle",
        "--scenario",
        sc.to_str().unwrap(),
        "--steps",
        "200",
        "--paths",
        "50",
        "--N",
        "4",
        "--seed",
        "7",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(0));
    let doc = stdout_json(&res);
    assert!(doc["difference_rel"].as_f64().unwrap() <= 1e-10);
    assert!(doc["Jsoc_exact"].is_f64());
}

#[test]
fn simulate_reruns_reproduce_outputs_byte_for_byte() {
    let sc = scenario("base.json");
    let mut contents: Vec<Vec<u8>> = Vec::new();
    for tag in ["sim-a", "sim-b"] {
        let out = out_dir(tag);
        let res = run(&[
            "simulate",
            "--scenario",
            sc.to_str().unwrap(),
            "--steps",
            "100",
            "--paths",
            "10",
            "--N",
            "6",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(res.status.code(), Some(0));
        let mut blob = Vec::new();
        for name in [
            "simulate_trajectories.csv",
            "simulate_mean_states.csv",
            "simulate_costs.json",
        ] {
            blob.extend(std::fs::read(out.join(name)).unwrap());
        }
        contents.push(blob);
    }
    assert_eq!(contents[0], contents[1]);
}

#[test]
fn usage_and_io_failures_exit_one() {
    let res = run(&["check", "--scenario", "/nonexistent/file.json"]);
    assert_eq!(res.status.code(), Some(1));
    assert!(!res.stderr.is_empty());

    let res = run(&["frobnicate"]);
    assert_eq!(res.status.code(), Some(1));

    let out = out_dir("bad-flag");
    let res = run(&["check", "--no-such-flag", "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
    assert_eq!(run(&["simulate", "--help"]).status.code(), Some(0));
}
