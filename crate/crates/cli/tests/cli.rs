use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn model(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../models").join(name)
}

fn mfg(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfg"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("MFG_LOG", "off")
        .output()
        .unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn help_and_version_exit_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&mfg(&["--help"], dir.path())), 0);
    assert_eq!(code(&mfg(&["--version"], dir.path())), 0);
}

#[test]
fn malformed_invocations_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cases: Vec<Vec<String>> = vec![
        vec!["frobnicate".into()],
        vec!["solve".into()],
        vec!["solve".into(), "--model".into(), "no/such/file.model".into()],
        vec!["solve".into(), "--model".into(), model("convex-1d.model").display().to_string(), "--set".into(), "bogus=1".into()],
        vec!["solve".into(), "--model".into(), model("convex-1d.model").display().to_string(), "--dt".into(), "-0.1".into()],
        vec!["hjb".into(), "--model".into(), model("counterexample.model").display().to_string()],
    ];
    for args in cases {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        let o = mfg(&refs, out);
        assert_eq!(code(&o), 1, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn model_parse_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.model");
    std::fs::write(&path, "dim = 2\nhorizon = 1\neta = 1 0; 0 1\nQ = 1 2 3\nR = 1 0; 0 1\nQbar = 0 0; 0 0\nS = 0 0; 0 0\nQT = 0 0; 0 0\n").unwrap();
    let o = mfg(&["check", "--model", path.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 4"), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn counterexample_writes_the_determinant_scan() {
    let dir = tempfile::tempdir().unwrap();
    let o = mfg(&["counterexample"], dir.path());
    assert_eq!(code(&o), 0);
    let rep = json(&dir.path().join("counterexample.json"));
    let t0 = rep["blowup"]["root"]["t0"].as_f64().unwrap();
    assert!(0.1 < t0 && t0 < 0.11);
    let csv = std::fs::read_to_string(dir.path().join("det.csv")).unwrap();
    assert!(csv.lines().count() > 10);
}

#[test]
fn check_reports_margins_and_monotonicity() {
    let dir = tempfile::tempdir().unwrap();
    let o = mfg(&["check", "--model", model("counterexample.model").to_str().unwrap(), "--horizon", "0.1"], dir.path());
    assert_eq!(code(&o), 0);
    let rep = json(&dir.path().join("check.json"));
    assert!(rep["assumptions"]["cii_margin"].as_f64().unwrap() < 0.0);
    assert_eq!(rep["monotonicity"]["llm_holds"], false);
    assert!(rep["delta_loc"]["value"].as_f64().unwrap() > 0.0);
}

#[test]
fn lq_oracle_writes_paths_and_riccati() {
    let dir = tempfile::tempdir().unwrap();
    let o = mfg(&["lq-oracle", "--model", model("tanh.model").to_str().unwrap(), "--dt", "0.01"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rep = json(&dir.path().join("oracle.json"));
    let p0 = rep["riccati_p0"][0].as_f64().unwrap();
    assert!((p0 - 1f64.tanh()).abs() < 1e-8, "{p0}");
    for f in ["mean_path.csv", "riccati.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn solve_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let path = model("convex-1d.model");
    let args = ["solve", "--model", path.to_str().unwrap(), "--particles", "500", "--dt", "0.01", "--seed", "3"];
    let o = mfg(&args, dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rep = json(&dir.path().join("report.json"));
    assert_eq!(rep["converged"], true);
    assert!(rep.get("wall_time_ms").is_none());
    let traj = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert_eq!(traj.lines().count(), 1 + 101);
    assert!(dir.path().join("field.csv").exists());
}

#[test]
fn non_contraction_exits_with_two_and_keeps_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let path = model("counterexample.model");
    let args = [
        "solve",
        "--model",
        path.to_str().unwrap(),
        "--horizon",
        "0.12",
        "--delta-override",
        "0.12",
        "--particles",
        "1000",
        "--dt",
        "0.01",
    ];
    let o = mfg(&args, dir.path());
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("NonContraction"));
    let rep = json(&dir.path().join("report.json"));
    assert_eq!(rep["diagnostic"]["kind"], "NonContraction");
}

#[test]
fn jacobian_and_hjb_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cii = model("cii-star.model");
    let o = mfg(&["jacobian", "--model", cii.to_str().unwrap(), "--particles", "400", "--dt", "0.02"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rep = json(&dir.path().join("jacobian.json"));
    assert_eq!(rep["bound_satisfied"], true);

    let args = ["hjb", "--model", cii.to_str().unwrap(), "--particles", "400", "--dt", "0.02", "--set", "nx=5", "--set", "nt=4", "--set", "n_paths=200"];
    let o = mfg(&args, dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("hjb.csv")).unwrap();
    assert!(csv.starts_with("t,x,residual\n"));
    assert_eq!(csv.lines().count(), 1 + 3 * 2);
}
