//! Exit-status contract and report files of the `pmlab` binary.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn pmlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pmlab")).args(args).output().expect("binary runs")
}

fn run_config(dir: &Path, body: &str, extra: &[&str]) -> (Output, std::path::PathBuf) {
    let cfg = dir.join("scenario.toml");
    std::fs::write(&cfg, body).unwrap();
    let out = dir.join("out");
    let mut args = vec!["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    (pmlab(&args), out)
}

fn report(out: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap()
}

const CHAIN5: &str = r#"
seed = 8
[model]
target = { kind = "masses", masses = [1.0, 2.0, 3.0, 2.0, 1.5] }
proposal = { kind = "nearest_neighbour" }
[family]
kind = "two_point"
low = 0.5
p_low = 0.8
"#;

#[test]
fn empty_experiment_list_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let (o, out) = run_config(dir.path(), "seed = 1\nexperiments = []\n", &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(&out);
    assert_eq!(r["experiments"], serde_json::json!([]));
    assert_eq!(r["pass"], true);
    assert_eq!(r["version"], env!("CARGO_PKG_VERSION"));
    assert!(r["config_hash"].as_str().unwrap().starts_with("sha256:"));
}

#[test]
fn missing_family_exits_one_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let body = CHAIN5.split("[family]").next().unwrap().to_string() + "[[experiments]]\nkind = \"spectral_sandwich\"\n";
    let (o, out) = run_config(dir.path(), &body, &[]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("`family`"), "{err}");
    assert!(!out.join("report.json").exists());
}

#[test]
fn unreadable_config_exits_one() {
    let o = pmlab(&["run", "--config", "/nonexistent/pmlab.toml"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn counterexample_k1_report() {
    let dir = tempfile::tempdir().unwrap();
    let body = "seed = 2\n[[experiments]]\nkind = \"counterexample\"\nname = \"ce\"\n[experiments.params]\nk_max = 1\n";
    let (o, out) = run_config(dir.path(), body, &["--jobs", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(&out);
    let q = r["experiments"][0]["report"]["blocks"][0]["quotient"].as_f64().unwrap();
    assert!(q <= -0.72, "{q}");
    let csv = std::fs::read_to_string(out.join("ce_blocks.csv")).unwrap();
    assert!(csv.starts_with("k,epsilon,quotient,bound"));
}

#[test]
fn violation_exits_two_and_dumps_instance() {
    let dir = tempfile::tempdir().unwrap();
    // a steep drift base cannot hold uniformly at N = 4
    let body = r#"
seed = 3
[model]
target = { kind = "geometric", states = 12, ratio = 0.5 }
proposal = { kind = "nearest_neighbour" }
[family]
kind = "two_point"
low = 0.5
p_low = 0.8
[[experiments]]
kind = "unifdrift"
name = "steep"
[experiments.params]
ns = [1, 2, 4]
v_levels = [1.0]
drift = { v = { kind = "geometric_x", base = 1.3 }, form = { kind = "polynomial", alpha = 1.0 }, region = { x_max = 0, w_low = 0.0, w_high = 1e300 } }
"#;
    let (o, out) = run_config(dir.path(), body, &[]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let dump: Value = serde_json::from_slice(&std::fs::read(out.join("steep_violation.json")).unwrap()).unwrap();
    assert!(dump["instance"]["model"].is_object());
    assert!(dump["instance"]["family"].is_object());
    assert_eq!(report(&out)["pass"], false);
}

#[test]
fn reports_are_reproducible() {
    let body = CHAIN5.to_string() + "[[experiments]]\nkind = \"spectral_sandwich\"\n[[experiments]]\nkind = \"variance_order\"\n";
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (oa, out_a) = run_config(a.path(), &body, &["--jobs", "1"]);
    let (ob, out_b) = run_config(b.path(), &body, &["--jobs", "4"]);
    assert_eq!(oa.status.code(), Some(0));
    assert_eq!(ob.status.code(), Some(0));
    assert_eq!(std::fs::read(out_a.join("report.json")).unwrap(), std::fs::read(out_b.join("report.json")).unwrap());
    let c = tempfile::tempdir().unwrap();
    let (_, out_c) = run_config(c.path(), &body, &["--seed-override", "99"]);
    assert_eq!(report(&out_c)["seed"], 99);
}

#[test]
fn random_suite_is_deterministic() {
    let a = pmlab(&["random", "--count", "10", "--seed", "5"]);
    let b = pmlab(&["random", "--count", "10", "--seed", "5"]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    let r: Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(r["suite"]["pass"], true);
    assert_eq!(pmlab(&["random", "--count", "0", "--seed", "5"]).status.code(), Some(1));
}

#[test]
fn bundled_scenarios_pass() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    for name in ["chain5.toml", "drift.toml"] {
        let dir = tempfile::tempdir().unwrap();
        let cfg = root.join(name);
        let o = pmlab(&["run", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{name}: {}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(report(dir.path())["pass"], true);
    }
}
