use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn covshift(args: &[&str], dir: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_covshift"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(out: &std::process::Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const SMALL: &str = "replications = 3\n[sim]\nn_source = 150\nn_target = 300\nseed = 4\n[learner]\nmax_epochs = 30\nbatch_size = 64\n";

#[test]
fn simulate_learn_estimate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("cfg.toml"), SMALL).unwrap();
    ok(&covshift(
        &["simulate", "--config", "cfg.toml", "--out-data", "data.csv", "--out-truth", "truth.csv", "--seed", "9"],
        d,
    ));
    let data = fs::read_to_string(d.join("data.csv")).unwrap();
    let mut lines = data.lines();
    assert_eq!(lines.next().unwrap(), "x1,x2,x3,g,a,y");
    assert_eq!(data.lines().count(), 451);
    let truth = fs::read_to_string(d.join("truth.csv")).unwrap();
    assert!(truth.starts_with("y1,y0,mu0_true,mu1_true,e1_true,s_true"));
    assert_eq!(truth.lines().count(), 451);

    ok(&covshift(
        &["learn", "--data", "data.csv", "--method", "se", "--config", "cfg.toml", "--out-policy", "policy.json"],
        d,
    ));
    let policy: Value = serde_json::from_str(&fs::read_to_string(d.join("policy.json")).unwrap()).unwrap();
    assert_eq!(policy["method"], "se");
    assert_eq!(policy["policy"]["theta"].as_array().unwrap().len(), 4);
    assert!(policy["nuisance_coefficients"]["mu1"].is_array());

    for (method, estimand, has_ci) in [("se", "r", true), ("se", "v", true), ("direct", "r", false), ("ipw", "r", false)] {
        let out = covshift(
            &["estimate", "--data", "data.csv", "--policy", "policy.json", "--method", method, "--estimand", estimand],
            d,
        );
        ok(&out);
        let est: Value = serde_json::from_slice(&out.stdout).unwrap();
        assert!(est["value"].as_f64().unwrap().is_finite());
        assert_eq!(est["std_error"].is_f64(), has_ci, "{method} {estimand}");
        if has_ci {
            assert!(est["ci_low"].as_f64().unwrap() <= est["value"].as_f64().unwrap());
            assert!(est["ci_high"].as_f64().unwrap() >= est["value"].as_f64().unwrap());
        }
    }
    let out = covshift(
        &["estimate", "--data", "data.csv", "--policy", "policy.json", "--method", "ipw", "--estimand", "v"],
        d,
    );
    assert!(!out.status.success());
}

#[test]
fn table_writes_report_and_summary_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("cfg.toml"), SMALL).unwrap();
    ok(&covshift(
        &[
            "table", "--config", "cfg.toml", "--methods", "direct,se", "--reps", "2", "--workers", "2", "--out",
            "report.json", "--out-csv", "summary.csv",
        ],
        d,
    ));
    let report: Value = serde_json::from_str(&fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["requested"], 2);
    assert_eq!(report["config"]["methods"], serde_json::json!(["direct", "se"]));
    let csv = fs::read_to_string(d.join("summary.csv")).unwrap();
    assert!(csv.starts_with("method,metric,mean,sd,relative_improvement,p_value"));
    assert_eq!(csv.lines().count(), 1 + 2 * 5);
}

#[test]
fn sweep_writes_long_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("cfg.toml"), SMALL).unwrap();
    ok(&covshift(
        &[
            "sweep", "--kind", "shift", "--grid", "0,0.5,...,1", "--config", "cfg.toml", "--reps", "2", "--out-csv",
            "sweep.csv",
        ],
        d,
    ));
    let csv = fs::read_to_string(d.join("sweep.csv")).unwrap();
    assert!(csv.starts_with("grid_value,method,metric,mean,sd"));
    assert_eq!(csv.lines().count(), 1 + 3 * 3 * 5);
}

#[test]
fn bad_inputs_fail_with_messages() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.toml"), "replications = 3\nunknown_key = 1\n").unwrap();
    let out = covshift(&["table", "--config", "bad.toml"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown"));

    fs::write(d.join("bad.csv"), "x1,g,a,y\n1.0,1,1,2.0\n2.0,0,,3.0\n").unwrap();
    let out = covshift(&["learn", "--data", "bad.csv", "--out-policy", "p.json"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("outcome present where group=0"));

    let out = covshift(&["sweep", "--kind", "diagonal", "--grid", "0", "--out-csv", "s.csv"], d);
    assert!(!out.status.success());
}

#[test]
fn help_documents_defaults() {
    let out = Command::new(env!("CARGO_BIN_EXE_covshift")).arg("--help").output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    for key in ["n_source = 512", "clip = 0.01", "step_size = 0.05", "replications = 50"] {
        assert!(text.contains(key), "missing {key}");
    }
}
