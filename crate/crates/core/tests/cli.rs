use std::fs;
use std::path::Path;
use std::process::Command;

use qedlab::cli;
use serde_json::Value;

fn small_config(dir: &Path, service: &str, interarrival: &str) -> std::path::PathBuf {
    let text = format!(
        r#"{{
  "scenario": "smoke",
  "service": {service},
  "interarrival": {interarrival},
  "alpha": 0.5,
  "beta": 0.5,
  "n_list": [10, 40, 90],
  "horizons": {{ "fluid": 2.0, "drift": 1.0, "components": 40.0 }},
  "sampling": {{ "burn_in": 20.0, "spacing": 1.0, "samples": 2000 }},
  "seeds": [3, 4],
  "dt": 0.01
}}"#
    );
    let path = dir.join("config.json");
    fs::write(&path, text).unwrap();
    path
}

fn run(sub: &str, config: &Path, out: &Path, extra: &[&str]) -> i32 {
    let mut args = vec!["qedlab", sub, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    cli::run(args)
}

const EXP: &str = r#"{ "kind": "exponential", "rate": 1.0 }"#;
const POISSON: &str = r#"{ "family": "exponential" }"#;

#[test]
fn malformed_json_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ \"scenario\": ").unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_qedlab"))
        .args(["cqlf", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn config_violations_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let good = fs::read_to_string(small_config(dir.path(), EXP, POISSON)).unwrap();
    let variants = [
        good.replace("\"dt\": 0.01", "\"dt\": 0.01, \"typo\": 1"),
        good.replace("[10, 40, 90]", "[40, 10]"),
        good.replace("[3, 4]", "[3, 3]"),
        good.replace("\"rate\": 1.0", "\"rate\": -1.0"),
        good.replace("\"beta\": 0.5", "\"beta\": 4.0"),
    ];
    for (i, text) in variants.iter().enumerate() {
        let path = dir.path().join(format!("v{i}.json"));
        fs::write(&path, text).unwrap();
        assert_eq!(run("cqlf", &path, dir.path(), &[]), 2, "variant {i}");
    }
    assert_eq!(cli::run(["qedlab", "cqlf"]), 2);
    assert_eq!(cli::run(["qedlab", "no-such-command"]), 2);
}

#[test]
fn cqlf_output_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), r#"{ "kind": "erlang", "stages": 2, "rate": 2.0 }"#, POISSON);
    let out = dir.path().join("out");
    assert_eq!(run("cqlf", &config, &out, &["--jobs", "1"]), 0);
    let cq: Value = serde_json::from_str(&fs::read_to_string(out.join("cqlf.json")).unwrap()).unwrap();
    let keys: Vec<&String> = cq.as_object().unwrap().keys().collect();
    assert_eq!(keys.len(), 4);
    for k in ["Q", "b", "kappa", "certificates"] {
        assert!(cq.get(k).is_some(), "{k}");
    }
    let manifest: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["seeds"], serde_json::json!([3, 4]));
    assert!(manifest["tolerances"]["ks_final"].is_number());
}

#[test]
fn seed_offset_shifts_every_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), EXP, POISSON);
    assert_eq!(run("cqlf", &config, dir.path(), &["--seed-offset", "10"]), 0);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"], serde_json::json!([13, 14]));
}

#[test]
fn interchange_is_reproducible_and_plottable() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), EXP, POISSON);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let code = run("interchange", &config, &a, &[]);
    assert!(code == 0 || code == 1, "{code}");
    assert_eq!(run("interchange", &config, &b, &[]), code);
    for name in ["interchange.csv", "distances.dat", "tails.dat", "manifest.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let csv = fs::read_to_string(a.join("interchange.csv")).unwrap();
    assert!(!csv.contains('\r'));
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("n,ks_x,w1_x,ks_g,tail@"));
    assert_eq!(lines.len(), 4);
    let (cols, rows) = cli::read_plot_data(&a.join("distances.dat")).unwrap();
    assert_eq!(cols[0], "n");
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().flatten().all(|v| v.is_finite()));
}

#[test]
fn harris_check_reports_constants() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), EXP, r#"{ "family": "lognormal", "sigma": 1.0 }"#);
    assert_eq!(run("harris-check", &config, dir.path(), &[]), 0);
    let rows: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("harris.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 3);
    assert_eq!(rows[0]["grid"]["violations"], 0);
}

#[test]
fn bounded_interarrivals_fail_the_harris_check() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), EXP, r#"{ "family": "deterministic" }"#);
    assert_eq!(run("harris-check", &config, dir.path(), &[]), 1);
}

#[test]
fn remaining_subcommands_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), r#"{ "kind": "erlang", "stages": 2, "rate": 2.0 }"#, POISSON);
    assert_eq!(run("simulate", &config, dir.path(), &[]), 0);
    assert!(dir.path().join("stationary_n90.csv").exists());
    assert_eq!(run("fluid", &config, dir.path(), &[]), 0);
    let (_, rows) = cli::read_plot_data(&dir.path().join("g_along_fluid.dat")).unwrap();
    assert!(!rows.is_empty() && rows.iter().flatten().all(|v| v.is_finite()));
    let code = run("diffusion", &config, dir.path(), &[]);
    assert!(code == 0 || code == 1);
    assert!(dir.path().join("diffusion.json").exists());
}

#[test]
fn empty_plot_is_header_only() {
    let mut buf = Vec::new();
    cli::write_plot_data(&mut buf, &["s", "tail"], &[]).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "# s tail\n");
}
