use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fracspde::config::ExperimentConfig;
use fracspde_cli::{run, EXIT_INFEASIBLE, EXIT_IO, EXIT_NUMERICAL, EXIT_OK, EXIT_VALIDATION};

fn repo_file(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(name)
}

fn invoke(args: &[&str]) -> (u8, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("fracspde").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn binary(args: &[&str], out_env: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fracspde"));
    cmd.args(args).env_remove("FRACSPDE_OUT");
    if let Some(dir) = out_env {
        cmd.env("FRACSPDE_OUT", dir);
    }
    cmd.output().unwrap()
}

/// Default config with the fields replaced by unwrapped high-mode constants,
/// so every sample needs `S(-t)` beyond its amplification cap.
fn failing_config() -> String {
    let n = 8;
    let unit = |i: usize| {
        let row: Vec<String> = (0..n).map(|k| format!("\"{}\"", if k == i { 1 } else { 0 })).collect();
        format!("[{}]", row.join(", "))
    };
    let base = fs::read_to_string(repo_file("default.cfg")).unwrap();
    let head = base.split("[fields]").next().unwrap();
    let mut s = format!("{head}[fields]\nfamily = \"custom\"\nrange = false\n\n[fields.drift]\noffset = {}\n", unit(n - 1));
    for i in 0..4 {
        s.push_str(&format!("\n[[fields.diffusion]]\noffset = {}\n", unit(n - 1 - i)));
    }
    s
}

#[test]
fn default_cfg_matches_built_in_defaults() {
    let text = fs::read_to_string(repo_file("default.cfg")).unwrap();
    assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), ExperimentConfig::default());
}

#[test]
fn montecarlo_echoes_config_and_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = repo_file("default.cfg");
    let out = dir.path().to_str().unwrap();
    let (code, stdout, stderr) =
        invoke(&["montecarlo", "--config", cfg.to_str().unwrap(), "--seed", "42", "--out", out, "--workers", "2"]);
    assert_eq!(code, EXIT_OK, "{stderr}");
    assert!(stdout.starts_with("# resolved config\n"));
    assert!(stdout.contains("seed = 42\n"));
    assert!(stdout.contains("assumption profile"));
    assert!(stdout.contains("samples 64/64 completed, 0 failed"));
    assert!(stdout.contains("nondegenerate fraction 1,"));
    for f in ["report.json", "manifest.json", "gamma_eigs.csv", "kde_1.csv", "kde_2.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn worker_count_and_rerun_keep_report_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = |dir: &Path, w: &'static str| {
        vec![
            "montecarlo".to_string(),
            "--set".into(),
            "samples=8".into(),
            "--set".into(),
            "steps=64".into(),
            "--out".into(),
            dir.to_str().unwrap().into(),
            "--workers".into(),
            w.into(),
        ]
    };
    for (dir, w) in [(a.path(), "1"), (b.path(), "4")] {
        let owned = args(dir, w);
        let refs: Vec<&str> = owned.iter().map(String::as_str).collect();
        assert_eq!(invoke(&refs).0, EXIT_OK);
    }
    let ra = fs::read(a.path().join("report.json")).unwrap();
    assert_eq!(ra, fs::read(b.path().join("report.json")).unwrap());
    assert_eq!(fs::read(a.path().join("gamma_eigs.csv")).unwrap(), fs::read(b.path().join("gamma_eigs.csv")).unwrap());
}

#[test]
fn infeasible_exponents_name_the_eta_interval() {
    let (code, stdout, stderr) = invoke(&["solve", "--set", "H=0.75", "--set", "kappa=0.3"]);
    assert_eq!(code, EXIT_INFEASIBLE);
    assert!(stderr.contains("eta-interval"), "{stderr}");
    assert!(stdout.is_empty());
}

#[test]
fn hurst_outside_range_is_a_validation_error() {
    let out = binary(&["--set", "H=1.2", "solve"], None);
    assert_eq!(out.status.code(), Some(EXIT_VALIDATION as i32));
    assert!(String::from_utf8_lossy(&out.stderr).contains("(1/2, 1)"));
}

#[test]
fn config_parse_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.cfg");
    let text = fs::read_to_string(repo_file("default.cfg")).unwrap().replace("steps = 256", "stepz = 256");
    fs::write(&path, text).unwrap();
    let (code, _, stderr) = invoke(&["solve", "--config", path.to_str().unwrap()]);
    assert_eq!(code, EXIT_VALIDATION);
    assert!(stderr.contains("stepz") && stderr.contains("line 6"), "{stderr}");

    let (code, _, stderr) = invoke(&["solve", "--set", "bogus=1"]);
    assert_eq!(code, EXIT_VALIDATION);
    assert!(stderr.contains("bogus"), "{stderr}");

    let (code, _, _) = invoke(&["solve", "--set", "steps"]);
    assert_eq!(code, EXIT_VALIDATION);
    let (code, _, _) = invoke(&["frobnicate"]);
    assert_eq!(code, EXIT_VALIDATION);
}

#[test]
fn io_errors_exit_with_the_io_code() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.cfg");
    let (code, _, stderr) = invoke(&["hormander", "--config", missing.to_str().unwrap()]);
    assert_eq!(code, EXIT_IO);
    assert!(stderr.contains("missing.cfg"));

    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let (code, _, stderr) = invoke(&["sample-fbm", "--set", "steps=16", "--out", blocker.join("sub").to_str().unwrap()]);
    assert_eq!(code, EXIT_IO);
    assert!(stderr.contains("file"), "{stderr}");
}

#[test]
fn failed_run_is_a_numerical_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fail.cfg");
    fs::write(&path, failing_config()).unwrap();
    let (code, _, stderr) = invoke(&[
        "montecarlo",
        "--config",
        path.to_str().unwrap(),
        "--set",
        "samples=4",
        "--set",
        "steps=64",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_NUMERICAL, "{stderr}");
    assert!(stderr.contains("4 of 4 samples failed"), "{stderr}");
}

#[test]
fn env_var_sets_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = binary(&["solve", "--set", "steps=32"], Some(dir.path()));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("solution.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "t,x_1,x_2,x_3,x_4,x_5,x_6,x_7,x_8");
    assert_eq!(lines.count(), 33);

    let flag = tempfile::tempdir().unwrap();
    let out = binary(&["solve", "--set", "steps=32", "--out", flag.path().to_str().unwrap()], Some(dir.path()));
    assert!(out.status.success());
    assert!(flag.path().join("solution.csv").exists());
}

#[test]
fn per_sample_subcommands_write_their_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    for (cmd, file) in [("sample-fbm", "noise.csv"), ("flows", "flows.json"), ("malliavin", "malliavin.json")] {
        let (code, _, stderr) = invoke(&[cmd, "--sample", "3", "--set", "steps=32", "--out", out]);
        assert_eq!(code, EXIT_OK, "{cmd}: {stderr}");
        assert!(dir.path().join(file).exists(), "{file}");
    }
    let noise = fs::read_to_string(dir.path().join("noise.csv")).unwrap();
    assert!(noise.starts_with("t,beta_1,beta_2,beta_3,beta_4\n0,0,0,0,0\n"));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("malliavin.json")).unwrap()).unwrap();
    assert_eq!(m[0]["t"], 0.0625);
}

#[test]
fn hormander_and_audit_report() {
    let (code, stdout, _) = invoke(&["hormander"]);
    assert_eq!(code, EXIT_OK);
    assert!(stdout.contains("full rank: true"));
    assert!(stdout.contains("projected full rank: true"));

    let (code, stdout, _) = invoke(&["hormander", "--set", "fields={family=\"degenerate\"}", "--set", "projection=[2]"]);
    assert_eq!(code, EXIT_OK);
    assert!(stdout.contains("full rank: false"));

    let (code, stdout, _) = invoke(&["audit", "--set", "steps=32"]);
    assert_eq!(code, EXIT_OK);
    assert!(stdout.contains("audit passed"), "{stdout}");
}

#[test]
fn help_exits_zero() {
    let (code, stdout, _) = invoke(&["--help"]);
    assert_eq!(code, EXIT_OK);
    assert!(stdout.contains("montecarlo") && stdout.contains("--set"));
}
