use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn spanel(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spanel"))
        .args(args)
        .current_dir(dir)
        .env_remove("SPANEL_WORKERS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn json(path: PathBuf) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn simulate_estimate_identify_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let sim = write(d, "sim.json", r#"{"schema_version":1,"n":200,"periods":2,"lambda0":0.5,"beta1":1.0,"delta":0.5,"zeta_width":2.0,"seed":11}"#);
    let out = spanel(&["simulate", "--config", sim.to_str().unwrap(), "--out", "data"], d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["panel.csv", "weights.csv", "simulate.manifest.json"] {
        assert!(d.join("data").join(f).exists(), "{f} missing");
    }
    let header = fs::read_to_string(d.join("data/panel.csv")).unwrap();
    assert!(header.starts_with("unit,period,y,z_1"));

    let args = ["--data", "data/panel.csv", "--weights", "data/weights.csv", "--out", "res"];
    let out = spanel(&[&["estimate"][..], &args].concat(), d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let est = json(d.join("res/estimate.json"));
    let theta = est["theta"].as_array().unwrap();
    assert_eq!(theta.len(), 3);
    assert!((theta[0].as_f64().unwrap() - 0.5).abs() < 0.4);
    assert_eq!(est["psi"].as_array().unwrap().len(), 3);
    assert_eq!(est["wald"].as_array().unwrap().len(), 3);
    assert!(est["converged"].as_bool().unwrap());

    let out = spanel(&[&["identify"][..], &args].concat(), d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(d.join("res/identification.json"));
    assert_eq!(report["verdict"], "linear_identified");
    let manifest = json(d.join("res/identify.manifest.json"));
    assert_eq!(manifest["subcommand"], "identify");
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 2);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for run in ["a", "b"] {
        let out = spanel(&["simulate", "--seed", "5", "--out", run], d);
        assert_eq!(code(&out), 0);
        let data = format!("{run}/panel.csv");
        let weights = format!("{run}/weights.csv");
        let out = spanel(&["estimate", "--data", &data, "--weights", &weights, "--out", run], d);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["panel.csv", "weights.csv", "estimate.json"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn monte_carlo_table_independent_of_workers() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write(d, "mc.json", r#"{"schema_version":1,"n":50,"lambdas":[0.1,0.7],"deltas":[0.3],"replications":8,"seed":9}"#);
    let one = spanel(&["montecarlo", "--config", cfg.to_str().unwrap(), "--workers", "1", "--out", "w1"], d);
    assert_eq!(code(&one), 0, "{}", String::from_utf8_lossy(&one.stderr));
    let four = Command::new(env!("CARGO_BIN_EXE_spanel"))
        .args(["montecarlo", "--config", cfg.to_str().unwrap(), "--out", "w4", "--replications", "8"])
        .env("SPANEL_WORKERS", "4")
        .current_dir(d)
        .output()
        .unwrap();
    assert_eq!(code(&four), 0);
    let a = fs::read_to_string(d.join("w1/table.csv")).unwrap();
    assert_eq!(a, fs::read_to_string(d.join("w4/table.csv")).unwrap());
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines[0], "n,lambda,delta,ols_bias,ols_mae,iv_bias,iv_mae,gmm_bias,gmm_mae,ols_fail,iv_fail,gmm_fail");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("50,0.1,0.3,"));
    assert_eq!(json(d.join("w4/montecarlo.manifest.json"))["workers"], 4);
}

#[test]
fn verify_vclq_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write(
        d,
        "v.json",
        r#"{"schema_version":1,"configs":2,"n":10,"draws":40000,"seed":2,"tolerance_se":4.0,"trace_zero":true}"#,
    );
    let out = spanel(&["verify-vclq", "--config", cfg.to_str().unwrap(), "--out", "v"], d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let csv = fs::read_to_string(d.join("v/vclq.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 4 + 1);
    assert!(csv.lines().last().unwrap().starts_with("trace_zero,"));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let unknown = write(d, "u.json", r#"{"schema_version":1,"n":10,"typo":true}"#);
    let out = spanel(&["simulate", "--config", unknown.to_str().unwrap()], d);
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("typo") && err.contains("schema_version"), "{err}");

    let version = write(d, "v.json", r#"{"schema_version":99}"#);
    assert_eq!(code(&spanel(&["montecarlo", "--config", version.to_str().unwrap()], d)), 1);
    assert_eq!(code(&spanel(&["estimate", "--data", "missing.csv"], d)), 1);
    assert_eq!(code(&spanel(&["no-such-command"], d)), 1);
    assert_eq!(code(&spanel(&["estimate"], d)), 1);

    let panel = write(d, "p.csv", "unit,period,y,z_1\n1,1,0,1\n2,1,1,2\n1,2,2,3\n2,2,3,4\n");
    let weights = write(d, "w.csv", "i,j,value\n1,1,1\n");
    let out = spanel(&["identify", "--data", panel.to_str().unwrap(), "--weights", weights.to_str().unwrap()], d);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("diagonal"));
}

#[test]
fn computation_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // z is zero everywhere, so no instrument survives
    let mut panel = String::from("unit,period,y,z_1\n");
    let mut weights = String::from("i,j,value\n");
    for i in 1..=6 {
        for t in 1..=2 {
            panel += &format!("{i},{t},{},0\n", (i * t) as f64 * 0.1);
        }
        weights += &format!("{i},{},1\n", i % 6 + 1);
    }
    let p = write(d, "p.csv", &panel);
    let w = write(d, "w.csv", &weights);
    let out = spanel(&["estimate", "--data", p.to_str().unwrap(), "--weights", w.to_str().unwrap(), "--out", "o"], d);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!d.join("o/estimate.json").exists());
}
