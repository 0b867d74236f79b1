use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn etmhe(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_etmhe"))
        .args(args)
        .current_dir(dir)
        .env_remove("ETMHE_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Data rows of a CSV (provenance comments and the column header skipped).
fn rows(csv: &str) -> Vec<&str> {
    csv.lines().filter(|l| !l.starts_with('#')).skip(1).collect()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("test.cfg");
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn simulate_writes_one_row_per_state() {
    let tmp = TempDir::new().unwrap();
    let cfg = configs().join("batch_reactor.cfg");
    let o = etmhe(&["simulate", "--config", cfg.to_str().unwrap(), "--out", "res", "--svg"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let run = std::fs::read_to_string(tmp.path().join("res/run.csv")).unwrap();
    assert_eq!(rows(&run).len(), 61);
    assert!(run.contains("\nt,x1,x2,xhat1,xhat2,gamma,err_norm,bound\n"));
    assert!(run.starts_with("# command=simulate\n# model=batch_reactor\n"));
    assert!(run.contains("# p1=[[4.539, 4.171], [4.171, 3.834]]\n"));
    assert!(run.contains("# horizon=34\n"));
    let gamma = std::fs::read_to_string(tmp.path().join("res/gamma.csv")).unwrap();
    assert_eq!(rows(&gamma).len(), 61);
    for svg in ["states.svg", "gamma.svg"] {
        let s = std::fs::read_to_string(tmp.path().join("res").join(svg)).unwrap();
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"), "{svg}");
    }
}

#[test]
fn alpha_override_is_echoed_and_recorded() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "model = \"batch_reactor\"\nsteps = 5\nalpha = 1.0\n");
    let o = etmhe(&["simulate", "--config", cfg.to_str().unwrap(), "--alpha", "5", "--seed", "3", "--out", "o"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.lines().any(|l| l == "alpha=5"), "{out}");
    assert!(out.lines().any(|l| l == "seed=3"));
    let run = std::fs::read_to_string(tmp.path().join("o/run.csv")).unwrap();
    assert!(run.contains("# alpha=5\n"));
    assert_eq!(rows(&run).len(), 6);
}

#[test]
fn missing_model_exits_with_code_two() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "steps = 10\n");
    let o = etmhe(&["simulate", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("field `model`"), "{}", stderr(&o));
}

#[test]
fn unknown_key_reports_its_line() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "model = \"batch_reactor\"\n# comment\nhorizn = 30\n");
    let o = etmhe(&["simulate", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("test.cfg:3:1:") && err.contains("horizn"), "{err}");
}

#[test]
fn invalid_p1_fails_check_with_code_two() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "model = \"batch_reactor\"\np1 = [[1.0, 2.0], [2.0, 1.0]]\n");
    let o = etmhe(&["check", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("test.cfg:2:") && err.contains("field `p1`"), "{err}");
}

#[test]
fn bad_flags_and_thread_settings_are_usage_errors() {
    let tmp = TempDir::new().unwrap();
    let cfg = configs().join("batch_reactor.cfg");
    let o = etmhe(&["check", "--config", cfg.to_str().unwrap(), "--scheme", "adaptive"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_etmhe"))
        .args(["check", "--config", cfg.to_str().unwrap()])
        .env("ETMHE_THREADS", "many")
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("ETMHE_THREADS"));
}

#[test]
fn check_prints_minimum_horizons() {
    let tmp = TempDir::new().unwrap();
    let cfg = configs().join("batch_reactor.cfg");
    let o = etmhe(&["check", "--config", cfg.to_str().unwrap()], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).lines().any(|l| l == "M_min=34"), "{}", stdout(&o));
    let o = etmhe(&["check", "--config", cfg.to_str().unwrap(), "--scheme", "varying"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).lines().any(|l| l == "M_min=23"), "{}", stdout(&o));
}

#[test]
fn sweep_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "model = \"batch_reactor\"\nsteps = 15\n\n[sweep]\nalphas = [1.0, 14.0]\nseeds = 3\n");
    let mut outputs = Vec::new();
    for (i, threads) in ["1", "2"].iter().enumerate() {
        let dir = format!("run{i}");
        let o = Command::new(env!("CARGO_BIN_EXE_etmhe"))
            .args(["sweep", "--config", cfg.to_str().unwrap(), "--out", &dir])
            .env("ETMHE_THREADS", threads)
            .current_dir(tmp.path())
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        let summary = std::fs::read(tmp.path().join(&dir).join("sweep_summary.csv")).unwrap();
        let runs = std::fs::read(tmp.path().join(&dir).join("sweep_runs.csv")).unwrap();
        outputs.push((summary, runs));
    }
    assert_eq!(outputs[0], outputs[1]);
    let summary = String::from_utf8(outputs[0].0.clone()).unwrap();
    assert!(summary.contains("\nalpha,mean_events,std_events,mean_rmse\n"));
    assert_eq!(rows(&summary).len(), 2);
    assert_eq!(rows(&String::from_utf8(outputs[0].1.clone()).unwrap()).len(), 6);
}

#[test]
fn compare_writes_paired_rows() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "model = \"batch_reactor\"\nsteps = 12\n\n[compare]\nseeds = 2\nablation = true\n");
    let o = etmhe(&["compare", "--config", cfg.to_str().unwrap(), "--out", "c"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let cmp = std::fs::read_to_string(tmp.path().join("c/comparison.csv")).unwrap();
    assert_eq!(rows(&cmp).len(), 2);
    assert!(cmp.contains("# compare.seeds=2\n"));
    let ab = std::fs::read_to_string(tmp.path().join("c/ablation.csv")).unwrap();
    assert_eq!(rows(&ab).len(), 2);
}
