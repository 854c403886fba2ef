use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dualexp"));
    c.env_remove("DUALEXP_THREADS");
    c
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn run(cfg: &Path, out: &Path) -> Output {
    bin().arg("run").arg(cfg).arg("--out").arg(out).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const PRICE: &str = r#"{"kind":"price","model":{"name":"basis_risk_2d"},"claim":{"label":"put","params":{"strike":100}},
 "settings":{"alpha":[0.05,0.1],"n_paths":4000,"n_steps":16,"seed":3}}"#;

#[test]
fn price_writes_csv_and_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "put.json", PRICE);
    let o = run(&cfg, &dir.path().join("out"));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let csv = std::fs::read_to_string(dir.path().join("out/put.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "alpha,zeroth,correction,total,oracle,gap,se_zeroth,se_correction");
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|x| x.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert!((r[1] + r[2] - r[3]).abs() < 1e-9 * r[3].abs());
        assert!((r[3] - r[4] - r[5]).abs() < 1e-9);
    }
    // the correction is linear in alpha
    assert!((rows[1][2] - 2.0 * rows[0][2]).abs() < 1e-9 * rows[1][2].abs());

    let meta: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/put.json")).unwrap()).unwrap();
    assert_eq!(meta["schema_version"], 1);
    assert_eq!(meta["kind"], "price");
    assert_eq!(meta["config"]["settings"]["seed"], 3);
    assert!(meta["wall_time_seconds"].as_f64().unwrap() >= 0.0);
    assert!(meta["diagnostics"]["kw"].is_object());
}

#[test]
fn rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "put.json", PRICE);
    assert!(run(&cfg, &dir.path().join("a")).status.success());
    let o = bin().arg("run").arg(&cfg).arg("--out").arg(dir.path().join("b")).arg("--threads").arg("2").output().unwrap();
    assert!(o.status.success());
    let a = std::fs::read(dir.path().join("a/put.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/put.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn verify_lemma_reports_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "lemma.json",
        r#"{"kind":"verify-lemma","model":{"name":"brownian"},"claim":{"label":"quadratic"},
 "settings":{"eps":[0.05,0.1],"n_paths":20000,"n_steps":16,"seed":1}}"#,
    );
    let o = run(&cfg, dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("lemma.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    let last: Vec<&str> = lines[2].split(',').collect();
    let l2_ratio: f64 = last[14].parse().unwrap();
    assert!((1.5..=2.5).contains(&l2_ratio), "{l2_ratio}");
    // no smaller eps below the first row
    assert_eq!(lines[1].split(',').nth(14), Some(""));
}

#[test]
fn validate_lists_every_violation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "bad.json",
        r#"{"kind":"price","model":{"name":"basis_risk_2d","params":{"rho":1.0}},"claim":{"label":"swaption"},
 "settings":{"alpha":[-1],"n_paths":5000,"n_steps":8,"seed":1}}"#,
    );
    let o = bin().arg("validate").arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let s = stdout(&o);
    assert!(s.contains("alpha must be positive"), "{s}");
    assert!(s.contains("|rho| < 1"), "{s}");
    assert!(s.contains("unknown claim 'swaption'") && s.contains("lookback_put"), "{s}");
}

#[test]
fn validate_accepts_good_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "put.json", PRICE);
    let o = bin().arg("validate").arg(&cfg).output().unwrap();
    assert!(o.status.success());
    assert!(!dir.path().join("put.csv").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let parse = write(dir.path(), "parse.json", r#"{"kind":"price", "oops": 1}"#);
    assert_eq!(run(&parse, dir.path()).status.code(), Some(2));
    let unknown_param = write(
        dir.path(),
        "param.json",
        r#"{"kind":"price","model":{"name":"basis_risk_2d","params":{"rh0":0.5}},"claim":{"label":"put"},
 "settings":{"alpha":[0.1],"n_paths":5000,"n_steps":8,"seed":1}}"#,
    );
    assert_eq!(run(&unknown_param, dir.path()).status.code(), Some(2));
    let incompatible = write(
        dir.path(),
        "inc.json",
        r#"{"kind":"entropy","model":{"name":"brownian"},"settings":{"n_paths":5000,"n_steps":8,"seed":1}}"#,
    );
    assert_eq!(run(&incompatible, dir.path()).status.code(), Some(3));
    let market_claim = write(
        dir.path(),
        "mkt.json",
        r#"{"kind":"expansion-scaling","model":{"name":"brownian"},"claim":{"label":"put"},
 "settings":{"eps":[0.1],"n_paths":5000,"n_steps":8,"seed":1}}"#,
    );
    assert_eq!(run(&market_claim, dir.path()).status.code(), Some(3));
    let missing = dir.path().join("nope.json");
    assert_eq!(run(&missing, dir.path()).status.code(), Some(2));
}

#[test]
fn listings_name_every_entry() {
    let m = stdout(&bin().arg("list-models").output().unwrap());
    for name in ["brownian", "basis_risk_2d", "multi_asset_basis_risk", "stochastic_correlation", "sv_ou"] {
        assert!(m.contains(name), "{name}");
    }
    let c = stdout(&bin().arg("list-claims").output().unwrap());
    for name in ["linear", "quadratic", "put", "lookback_put", "mv_tradeoff"] {
        assert!(c.contains(name), "{name}");
    }
}
