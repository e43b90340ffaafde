//! End-to-end checks of the command-line surface: subcommands, file outputs,
//! exit codes, and byte-level determinism of the reports.

use std::fs;
use std::path::Path;
use std::process::Command;

fn forge() -> Command {
    Command::new(env!("CARGO_BIN_EXE_icgd-forge"))
}

fn write_cfg(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, body).unwrap();
    path
}

#[test]
fn verify_default_passes_and_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let status = forge()
        .args(["verify", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    for file in [
        "trajectory.csv",
        "deviations.csv",
        "trace.csv",
        "bounds.json",
        "radii.json",
        "convergence.json",
        "instance.json",
    ] {
        assert!(out.join(file).exists(), "{file} missing");
    }
    let bounds: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("bounds.json")).unwrap()).unwrap();
    assert_eq!(bounds["all_pass"], true);
    let traj = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert!(traj.starts_with("# icgd-forge v"));
}

#[test]
fn verify_reports_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), r#"{"width": 3, "examples": 4, "steps": 2, "seed": 5}"#);
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let status = forge()
            .args(["verify", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    }
    for file in ["trajectory.csv", "deviations.csv", "trace.csv", "bounds.json"] {
        let a = fs::read(out_a.join(file)).unwrap();
        let b = fs::read(out_b.join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
}

#[test]
fn exact_mode_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), r#"{"width": 3, "examples": 4, "steps": 2}"#);
    let out = dir.path().join("out");
    let output = forge()
        .args(["verify", "--config"])
        .arg(&cfg)
        .args(["--mode", "exact", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8(output.stdout).unwrap();
    assert!(stdout.contains("mode=exact"), "{stdout}");
}

#[test]
fn infeasible_budget_fails_with_binding_constant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        dir.path(),
        r#"{"eps_target": 1e-12, "max_segments": 1000}"#,
    );
    let output = forge()
        .args(["verify", "--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8(output.stderr).unwrap();
    assert!(stderr.contains("eps_r"), "{stderr}");
    assert!(stderr.contains("hint"), "{stderr}");
}

#[test]
fn sweep_needs_axes_and_refines_with_segments() {
    let dir = tempfile::tempdir().unwrap();
    // no axes -> usage error
    let empty_cfg = write_cfg(dir.path(), r#"{}"#);
    let output = forge()
        .args(["sweep", "--config"])
        .arg(&empty_cfg)
        .args(["--out"])
        .arg(dir.path().join("none"))
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8(output.stderr)
        .unwrap()
        .contains("sweep axis"));

    let cfg = write_cfg(
        dir.path(),
        r#"{"sweep_segments": [20, 40, 80], "examples": 4, "width": 3}"#,
    );
    let out = dir.path().join("sweep");
    let status = forge()
        .args(["sweep", "--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let errs: Vec<f64> = csv
        .lines()
        .skip(2)
        .map(|l| l.split(',').nth(5).unwrap().parse().unwrap())
        .collect();
    assert_eq!(errs.len(), 3);
    assert!(errs[0] > errs[1] && errs[1] > errs[2], "not refining: {errs:?}");
}

#[test]
fn sweep_step_axis_stays_under_envelope_and_survives_cell_errors() {
    let dir = tempfile::tempdir().unwrap();
    // depth 9 blows past the head cap -> that cell errors, sweep continues
    let cfg = write_cfg(
        dir.path(),
        r#"{"sweep_steps": [1, 2, 4], "sweep_depth": [3, 9], "examples": 4, "width": 3, "max_total_heads": 600}"#,
    );
    let out = dir.path().join("sweep");
    let output = forge()
        .args(["sweep", "--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(&out)
        .output()
        .unwrap();
    // nonzero exit because some cells failed, but all rows recorded
    assert!(!output.status.success());
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(2).collect();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().any(|r| r.contains("error:")));
    assert!(rows.iter().filter(|r| r.ends_with(",ok")).count() >= 3);
}

#[test]
fn build_emits_stack_dir_with_kind_tags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), r#"{"width": 3, "examples": 4, "steps": 2}"#);
    let out = dir.path().join("out");
    let status = forge()
        .args(["build", "--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("stack/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["layer_count"], 20);
    assert_eq!(manifest["kinds"][0], "attn");
    let layer0: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("stack/layer_0000_attn.json")).unwrap())
            .unwrap();
    assert_eq!(layer0["kind"], "attn");
    // one file per layer plus the manifest
    let count = fs::read_dir(out.join("stack")).unwrap().count();
    assert_eq!(count, 21);
}

#[test]
fn oracle_writes_loss_curve() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let status = forge()
        .args(["oracle", "--out"])
        .arg(&out)
        .args(["--seed", "21"])
        .status()
        .unwrap();
    assert!(status.success());
    let csv = fs::read_to_string(out.join("oracle.csv")).unwrap();
    let losses: Vec<f64> = csv
        .lines()
        .skip(2)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(losses.len(), 4);
    assert!(losses.windows(2).all(|w| w[1] <= w[0] + 1e-12));
}

#[test]
fn json_flag_switches_report_format() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), r#"{"width": 3, "examples": 4, "steps": 1}"#);
    let out = dir.path().join("out");
    let status = forge()
        .args(["verify", "--config"])
        .arg(&cfg)
        .args(["--json", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("trajectory.json").exists());
    assert!(out.join("deviations.json").exists());
    assert!(!out.join("trajectory.csv").exists());
}
