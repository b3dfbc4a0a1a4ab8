use std::path::Path;
use std::process::{Command, Output};

use codedlf::tensor::write_lf5d;
use codedlf::Tensor5;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_codedlf")).current_dir(dir).args(args).output().unwrap()
}

fn gen_scene(dir: &Path) {
    let out = run(dir, &["gen-scene", "--pattern", "checker", "--disparity", "constant:0.5", "--dims", "3,3,8,8,4", "--out-prefix", "scene"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn help_and_version_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(run(dir.path(), &["--version"]).status.code(), Some(0));
    assert_eq!(run(dir.path(), &["train-toy", "--help"]).status.code(), Some(0));
}

#[test]
fn usage_and_validation_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["mask-gen", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["mask-gen", "--dims", "4,0,3", "--out", "m.lf5d"]).status.code(), Some(1));
    let missing = run(dir.path(), &["project", "--in", "absent.lf5d", "--out", "p.lf5d"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(!missing.stderr.is_empty());
}

#[test]
fn numerical_failure_exits_two() {
    // Every bright measurement is saturated, so nothing constrains the fit.
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_lf5d(&Tensor5::filled([1, 3, 2, 2, 1], 0.01), d.join("dark.lf5d")).unwrap();
    write_lf5d(&Tensor5::filled([1, 3, 2, 2, 2], 1.0), d.join("bright.lf5d")).unwrap();
    write_lf5d(&Tensor5::from_vec([1, 1, 2, 2, 1], vec![0.0, 1.0, 1.0, 2.0]).unwrap(), d.join("bayer.lf5d")).unwrap();
    std::fs::write(d.join("times.txt"), "0.1\n0.2\n0.4\n").unwrap();
    let out = run(d, &[
        "calibrate", "--dark", "dark.lf5d", "--bright", "bright.lf5d", "--times", "times.txt",
        "--bayer", "bayer.lf5d", "--out", "calib.json",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gen_scene_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    gen_scene(dir.path());
    for f in ["scene.cv.lf5d", "scene.disp.lf5d", "scene.lf.lf5d"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let lf = codedlf::tensor::read_lf5d(dir.path().join("scene.lf.lf5d")).unwrap();
    assert_eq!(lf.dims(), [3, 3, 8, 8, 4]);
}

#[test]
fn evaluating_a_field_against_itself_reports_infinite_psnr() {
    let dir = tempfile::tempdir().unwrap();
    gen_scene(dir.path());
    let out = run(dir.path(), &["evaluate", "--pred", "scene.cv.lf5d", "--truth", "scene.cv.lf5d", "--kind", "cv", "--no-timestamp"]);
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["psnr_db"], "inf");
    assert_eq!(report["exact_equal"], true);
    assert_eq!(report["max_abs_diff"], 0.0);
    assert!(report.get("timestamp_unix").is_none());
}

#[test]
fn reports_carry_a_timestamp_by_default() {
    let dir = tempfile::tempdir().unwrap();
    gen_scene(dir.path());
    let out = run(dir.path(), &["evaluate", "--pred", "scene.lf.lf5d", "--truth", "scene.lf.lf5d"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["timestamp_unix"].is_u64());
}
