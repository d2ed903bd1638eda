use std::path::Path;
use std::process::{Command, Output};

fn lcbnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lcbnn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let text = stdout(&lcbnn(&["preset", "diabetes"]));
    let mut cfg: serde_json::Value = serde_json::from_str(&text).unwrap();
    cfg["train"]["epochs"] = 3.into();
    cfg["seeds"] = serde_json::json!([0]);
    cfg["eval"]["mc_samples"] = 5.into();
    cfg["data"]["test_per_class"] = 50.into();
    let path = dir.join("tiny.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&lcbnn(&["--help"])), 0);
    assert_eq!(code(&lcbnn(&["--version"])), 0);
}

#[test]
fn bad_arguments_are_validation_errors() {
    assert_eq!(code(&lcbnn(&[])), 1);
    assert_eq!(code(&lcbnn(&["run"])), 1);
    assert_eq!(code(&lcbnn(&["frobnicate"])), 1);
    assert_eq!(code(&lcbnn(&["run", "--preset", "nope"])), 1);
    assert_eq!(
        code(&lcbnn(&["run", "--preset", "diabetes", "--seeds", "3-1"])),
        1
    );
}

#[test]
fn invalid_config_file_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"schema_version": 1, "name": "x"}"#).unwrap();
    let out = lcbnn(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(!out.stderr.is_empty());
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.ckpt");
    let out = lcbnn(&[
        "gainmap",
        "--checkpoint",
        missing.to_str().unwrap(),
        "--data",
        missing.to_str().unwrap(),
        "--utility",
        "diabetes",
        "--out",
        dir.path().join("g.csv").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn kl_check_passes_and_prints_json() {
    let out = lcbnn(&["kl-check", "--instances", "20", "--seed", "4"]);
    assert_eq!(code(&out), 0);
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["instances"], 20);
}

#[test]
fn selfcheck_passes() {
    let out = lcbnn(&["selfcheck", "--json"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["passed"], true);
}

#[test]
fn run_then_gainmap_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("out");
    let out = lcbnn(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--threads",
        "1",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "report.json",
        "results.csv",
        "summary.csv",
        "checkpoints/lc_seed0.ckpt",
    ] {
        assert!(out_dir.join(f).exists(), "{f}");
    }

    let data_dir = dir.path().join("data");
    let out = lcbnn(&[
        "gen-data",
        "--out",
        data_dir.to_str().unwrap(),
        "--seed",
        "2",
    ]);
    assert_eq!(code(&out), 0);

    let gains = dir.path().join("gains.csv");
    let out = lcbnn(&[
        "gainmap",
        "--checkpoint",
        out_dir.join("checkpoints/lc_seed0.ckpt").to_str().unwrap(),
        "--data",
        data_dir.join("test.csv").to_str().unwrap(),
        "--utility",
        "diabetes",
        "--samples",
        "10",
        "--out",
        gains.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&gains).unwrap();
    assert_eq!(text.lines().count(), 301);
    assert!(text.starts_with("index,label,"));
}

#[test]
fn seeds_override_is_applied() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("out");
    let out = lcbnn(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--seeds",
        "4,6-7",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap())
            .unwrap();
    let mut seeds: Vec<u64> = report["runs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["seed"].as_u64().unwrap())
        .collect();
    seeds.sort();
    seeds.dedup();
    assert_eq!(seeds, vec![4, 6, 7]);
}

#[test]
fn sweep_writes_one_row_per_axis_value_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("out");
    let out = lcbnn(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--axis",
        "hidden-size",
        "--values",
        "2,5",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rows = std::fs::read_to_string(out_dir.join("results.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 2 * 3);
}
