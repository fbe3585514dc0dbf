use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sacforge(args: &[&str], cwd: &Path, env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sacforge"));
    cmd.args(args).current_dir(cwd).env_remove("SACFORGE_OUT");
    if let Some(p) = env_out {
        cmd.env("SACFORGE_OUT", p);
    }
    cmd.output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn csv_names(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    v.sort();
    v
}

#[test]
fn relu_writes_one_curve_per_regime_and_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "relu.toml", "experiment = \"relu\"\nregimes = [\"wi\", \"mi\", \"si\"]\n");
    let out = dir.path().join("out");
    let o = sacforge(&["relu", "--config", &cfg, "--out", out.to_str().unwrap(), "--check"], dir.path(), None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        csv_names(&out),
        vec!["relu_mi_s3_t300.csv", "relu_si_s3_t300.csv", "relu_wi_s3_t300.csv"]
    );
    let text = fs::read_to_string(out.join("relu_wi_s3_t300.csv")).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# config_hash="));
    assert!(text.lines().any(|l| l == "x,y"));
    let summary = fs::read_to_string(out.join("summary.json")).unwrap();
    assert!(summary.contains("\"max_abs\""));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "m.toml", "[sweep]\nx_min = -1.0\nx_max = 1.0\npoints = 9\n");
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = sacforge(&["multiplier", "--config", &cfg, "--out", out.to_str().unwrap(), "--splines", "1"], dir.path(), None);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let names = csv_names(&dir.path().join("a"));
    assert_eq!(names.len(), 15);
    for n in names.iter().chain(std::iter::once(&"summary.json".to_string())) {
        assert_eq!(fs::read(dir.path().join("a").join(n)).unwrap(), fs::read(dir.path().join("b").join(n)).unwrap(), "{n}");
    }
}

#[test]
fn overrides_select_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "p.toml", "[sweep]\nx_min = -2.0\nx_max = 2.0\npoints = 5\n");
    let out = dir.path().join("o");
    let o = sacforge(
        &["proto-shape", "--config", &cfg, "--out", out.to_str().unwrap(), "--regime", "rect", "--splines", "2", "--splines", "4"],
        dir.path(),
        None,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(csv_names(&out), vec!["proto-shape_rect_s2_t300.csv", "proto-shape_rect_s4_t300.csv"]);
    let rows = fs::read_to_string(out.join("proto-shape_rect_s2_t300.csv")).unwrap().lines().count();
    assert_eq!(rows, 3 + 5);
}

#[test]
fn output_directory_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "r.toml", "regimes = [\"si\"]\n[sweep]\nx_min = -1.0\nx_max = 1.0\npoints = 3\n");
    let env_out = dir.path().join("from-env");
    let o = sacforge(&["relu", "--config", &cfg], dir.path(), Some(&env_out));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(env_out.join("summary.json").exists());
    let o = sacforge(&["relu", "--config", &cfg], dir.path(), None);
    assert!(o.status.success());
    assert!(dir.path().join("sacforge-out").join("summary.json").exists());
}

#[test]
fn config_errors_report_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", "experiment = \"relu\"\n\nregimes = [\"xi\"]\n");
    let o = sacforge(&["relu", "--config", &cfg, "--out", "o"], dir.path(), None);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn check_fails_on_a_violated_invariant() {
    let dir = tempfile::tempdir().unwrap();
    // a proto-shape against a straight line is far from invariant
    let a = "# config_hash=x\nx,y\n0.0,0.0\n0.5,0.1\n1.0,1.0\n";
    let b = "# config_hash=x\nx,y\n0.0,0.0\n0.5,0.5\n1.0,1.0\n";
    write(dir.path(), "a.csv", a);
    write(dir.path(), "b.csv", b);
    let cfg = write(dir.path(), "inv.toml", "[invariance]\ninputs = [\"a.csv\", \"b.csv\"]\n");
    let o = sacforge(&["invariance-report", "--config", &cfg, "--out", "o"], dir.path(), None);
    assert!(o.status.success());
    let o = sacforge(&["invariance-report", "--config", &cfg, "--out", "o", "--check"], dir.path(), None);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn wrong_experiment_in_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "d.toml", "experiment = \"dac\"\n");
    let o = sacforge(&["relu", "--config", &cfg, "--out", "o"], dir.path(), None);
    assert_eq!(o.status.code(), Some(2));
}
