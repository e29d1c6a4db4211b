use std::path::Path;
use std::process::{Command, Output};

fn fedrecon(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedrecon"))
        .args(args)
        .current_dir(cwd)
        .env_remove("FEDRECON_OUT_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn tiny_config(dir: &Path, forget: usize) -> std::path::PathBuf {
    let path = dir.join("tiny.json");
    std::fs::write(
        &path,
        format!(
            r#"{{
  "dataset": {{"source": "synthetic_blobs", "count": 60, "classes": 2, "shape": [1, 6, 6], "seed": 3, "train": 40, "public": 20}},
  "model": {{"arch": "mlp"}},
  "fed": {{"clients": 2, "rounds": 1, "local_epochs": 1, "local_lr": 0.1, "batch_size": 8, "dirichlet_alpha": 1.0}},
  "scenario": {{"total": 4, "forget": {forget}}},
  "attack": {{"iterations": 8, "eta_r": 0.05, "eta_f": 0.05}},
  "modes": ["dlg_baseline", "dragd", "dragdp"],
  "out_dir": "out",
  "seed": 4
}}"#
        ),
    )
    .unwrap();
    path
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn dry_run_prints_config_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 2);
    let o = fedrecon(&["run", "--config", cfg.to_str().unwrap(), "--dry-run", "--seed", "9", "--modes", "dragd"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("\"seed\": 9"));
    assert!(text.contains("\"dragd\""));
    assert!(!text.contains("dlg_baseline"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn invalid_config_fails_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 4);
    let o = fedrecon(&["run", "--config", cfg.to_str().unwrap()], dir.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("|D_f|"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn missing_dataset_path_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("idx.json");
    let text = std::fs::read_to_string(tiny_config(dir.path(), 2))
        .unwrap()
        .replace(r#""source": "synthetic_blobs", "count": 60, "classes": 2, "shape": [1, 6, 6], "seed": 3"#, r#""source": "idx", "images": "nope-images", "labels": "nope-labels""#);
    std::fs::write(&cfg, text).unwrap();
    let o = fedrecon(&["run", "--config", cfg.to_str().unwrap()], dir.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope-images"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn run_then_report_reproduces_summary_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 2);
    let o = fedrecon(&["run", "--config", cfg.to_str().unwrap(), "--out", "a"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run_table = stdout(&o);

    let r = fedrecon(&["report", "a"], dir.path());
    assert!(r.status.success());
    let report = stdout(&r);
    assert!(run_table.starts_with(&report));

    let rows: Vec<&str> = report.lines().skip(1).collect();
    let methods: Vec<&str> = rows.iter().map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(methods, ["DLG", "Part", "DRAGD", "DRAGDP"]);
    assert!(report.lines().next().unwrap().contains("MSE ↓"));

    // every number printed is the exact string in summary.csv
    let summary = std::fs::read_to_string(dir.path().join("a/summary.csv")).unwrap();
    for (line, row) in summary.lines().skip(1).zip(&rows) {
        let cells: Vec<&str> = line.split(',').collect();
        let printed: Vec<&str> = row.split_whitespace().rev().take(3).collect();
        assert_eq!(printed, [cells[4], cells[3], cells[2]]);
    }
}

#[test]
fn same_seed_same_csv_bytes_and_env_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 2);
    let a = fedrecon(&["run", "--config", cfg.to_str().unwrap(), "--out", "a"], dir.path());
    assert!(a.status.success());
    let b = Command::new(env!("CARGO_BIN_EXE_fedrecon"))
        .args(["run", "--config", cfg.to_str().unwrap()])
        .current_dir(dir.path())
        .env("FEDRECON_OUT_DIR", "b")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(b.status.success());
    for mode in ["dlg_baseline", "dragd", "dragdp"] {
        for file in ["loss.csv", "metrics.csv"] {
            let x = std::fs::read(dir.path().join("a").join(mode).join(file)).unwrap();
            let y = std::fs::read(dir.path().join("b").join(mode).join(file)).unwrap();
            assert_eq!(x, y, "{mode}/{file}");
        }
    }
}

#[test]
fn report_on_empty_dir_lists_missing() {
    let dir = tempfile::tempdir().unwrap();
    let o = fedrecon(&["report", "."], dir.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("config.json"));
}

#[test]
fn gradcheck_small_passes_with_per_suite_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = fedrecon(&["gradcheck", "--configs", "3"], dir.path());
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.contains("max rel err"));
    assert!(text.contains("all gradient checks passed"));
}

#[test]
fn bundled_presets_validate() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets");
    for name in ["mnist_fig2.json", "faces.json", "ablation.json"] {
        let o = fedrecon(&["run", "--config", root.join(name).to_str().unwrap(), "--dry-run"], &root);
        assert!(o.status.success(), "{name}: {}", String::from_utf8_lossy(&o.stderr));
    }
}
