use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fghflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fghflow"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

fn meta(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(dir.join("meta.json")).unwrap()).unwrap()
}

#[test]
fn run_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(
        tmp.path(),
        r#"
preset = "fig3"
[sampler]
method = "psghmc-fgh"
n_steps = 40
[output]
snapshot_every = 20
metrics_every = 20
reference_samples = 200
"#,
    );
    let out = tmp.path().join("out");
    let o = fghflow(&["run", "--config", &config, "--out", out.to_str().unwrap(), "--plot"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 3 * 50);
    assert_eq!(fs::read_to_string(out.join("metrics.csv")).unwrap().lines().count(), 4);
    for it in [0, 20, 40] {
        assert!(out.join(format!("plots/iter_{it:05}.png")).exists());
    }
    let m = meta(&out);
    assert_eq!(m["status"], "ok");
    assert_eq!(m["seed"], 0);
}

#[test]
fn invalid_config_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(
        tmp.path(),
        "[target]\nname = \"gaussian\"\n[sampler]\nmethod = \"blob\"\neps = -1.0\nn_particles = 10\nn_steps = 5\n",
    );
    let o = fghflow(&["run", "--config", &config, "--out", tmp.path().join("out").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sampler.eps"));
}

#[test]
fn divergent_run_exits_two_with_partial_output() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(
        tmp.path(),
        r#"
[target]
name = "gaussian"
mean = [0.0, 0.0]
cov = 1.0
[sampler]
method = "blob"
eps = 10.0
n_particles = 10
n_steps = 2000
[output]
snapshot_every = 100
reference_samples = 100
"#,
    );
    let out = tmp.path().join("out");
    let o = fghflow(&["run", "--config", &config, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let m = meta(&out);
    assert_eq!(m["status"], "failed");
    assert!(fs::read_to_string(out.join("trace.csv")).unwrap().lines().count() > 1);
}

#[test]
fn unknown_preset_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let o = fghflow(&["compare", "--preset", "nope", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn compare_fig3_writes_four_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let o = fghflow(&["compare", "--preset", "fig3", "--out", tmp.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for m in ["blob", "sghmc", "psghmc-det", "psghmc-fgh"] {
        let dir = tmp.path().join(m);
        assert_eq!(meta(&dir)["status"], "ok");
        assert_eq!(meta(&dir)["snapshot_iterations"].as_array().unwrap().len(), 35);
    }
}

#[test]
fn validate_fast_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let report = tmp.path().join("report.json");
    let o = fghflow(&["validate", "--level", "fast", "--out", report.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let r: serde_json::Value = serde_json::from_slice(&fs::read(report).unwrap()).unwrap();
    assert_eq!(r["pass"], true);
    assert!(r["checks"].as_array().unwrap().iter().all(|c| c["pass"] == true));
}
