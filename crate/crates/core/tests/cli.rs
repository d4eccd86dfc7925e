use std::fs;
use std::path::Path;
use std::process::Command;

use abnn::evaluation::MetricsReport;
use abnn::theory::CheckResult;

const BIN: &str = env!("CARGO_BIN_EXE_abnn");

fn run(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(BIN).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn write_config(dir: &Path, json: &str) -> String {
    let path = dir.join("run.json");
    fs::write(&path, json).unwrap();
    path.to_str().unwrap().to_string()
}

const SMALL: &str = r#"{"n_per_class": 60, "trainer": {"epochs": 2, "batch_size": 32}, "eval": {"n_samples_eval": 10, "trim": 0.01, "seed": 0}}"#;

#[test]
fn gen_data_writes_six_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(run(&["gen-data", "--config", &cfg, "--out", a.to_str().unwrap()]).0, 0);
    assert_eq!(run(&["gen-data", "--config", &cfg, "--out", b.to_str().unwrap()]).0, 0);
    let mut names: Vec<String> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "full.csv",
            "meta.json",
            "ood_train.csv",
            "semi.csv",
            "test.csv",
            "train.csv"
        ]
    );
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n}");
    }
}

#[test]
fn single_class_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"data": {"classes": 1}}"#);
    let (code, _, err) = run(&["gen-data", "--config", &cfg]);
    assert_eq!(code, 1);
    assert!(err.contains("K ≥ 2"), "{err}");
}

#[test]
fn bad_configs_exit_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    for (json, needle) in [
        (r#"{"trainer": {"alpha": 1.5}}"#, "alpha"),
        (r#"{"trainer": {"n_samples": 0}}"#, "n_samples"),
        (r#"{"data": {"ood_noise_std": -2.0}}"#, "ood_noise_std"),
        (r#"{"unknown_key": true}"#, "unknown"),
    ] {
        let cfg = write_config(dir.path(), json);
        let (code, _, err) = run(&["train", "--config", &cfg]);
        assert_eq!(code, 1, "{json}");
        assert!(err.contains(needle), "{json}: {err}");
    }
}

#[test]
fn missing_data_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    assert_eq!(run(&["train", "--config", &cfg]).0, 2);
}

#[test]
fn train_eval_report_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    assert_eq!(run(&["gen-data", "--config", &cfg]).0, 0);
    let out = dir.path().join("o");
    let o = out.to_str().unwrap();
    let names = [
        "checkpoint.json",
        "train_log.csv",
        "metrics.json",
        "ordered_uncertainty.csv",
        "histogram.csv",
    ];
    let mut snapshots = Vec::new();
    for _ in 0..2 {
        let (code, _, err) = run(&["train", "--config", &cfg, "--out", o]);
        assert_eq!(code, 0, "{err}");
        let ckpt = out.join("checkpoint.json");
        let (code, stdout, err) = run(&[
            "eval",
            "--config",
            &cfg,
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--out",
            o,
        ]);
        assert_eq!(code, 0, "{err}");
        let parsed: MetricsReport = serde_json::from_str(&stdout).unwrap();
        assert!((0.0..=1.0).contains(&parsed.id_vs_full.auroc));
        snapshots.push(names.map(|n| fs::read(out.join(n)).unwrap()));
    }
    for (i, n) in names.iter().enumerate() {
        assert_eq!(snapshots[0][i], snapshots[1][i], "{n}");
    }
    let out1 = out.clone();
    let out2 = dir.path().join("o2");
    fs::create_dir_all(&out2).unwrap();
    fs::copy(out.join("metrics.json"), out2.join("metrics.json")).unwrap();
    let report: MetricsReport = serde_json::from_slice(&fs::read(out1.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report.mode, "abnn");
    let hist = fs::read_to_string(out1.join("histogram.csv")).unwrap();
    assert!(hist.starts_with("dataset,bin_left,bin_right,count\n"));

    let merged = dir.path().join("table.csv");
    let rcfg = dir.path().join("report.json");
    let list = format!(
        r#"{{"reports": ["{}", "{}"]}}"#,
        out1.join("metrics.json").display(),
        out2.join("metrics.json").display()
    );
    fs::write(&rcfg, list).unwrap();
    assert_eq!(
        run(&[
            "report",
            "--config",
            rcfg.to_str().unwrap(),
            "--out",
            merged.to_str().unwrap()
        ])
        .0,
        0
    );
    let table = fs::read_to_string(merged).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.lines().nth(1).unwrap().contains(",abnn,0,0.95,"));
}

#[test]
fn bbp_log_has_no_phase3_entries() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"n_per_class": 40, "trainer": {"epochs": 2, "mode": "bbp"}}"#,
    );
    assert_eq!(run(&["gen-data", "--config", &cfg]).0, 0);
    assert_eq!(run(&["train", "--config", &cfg]).0, 0);
    let log = fs::read_to_string(dir.path().join("out/train_log.csv")).unwrap();
    let mut lines = log.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "phase3_loss").unwrap();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[col], "", "{line}");
        assert_ne!(fields[header.iter().position(|h| *h == "phase2_loss").unwrap()], "");
    }
}

fn verify(json: &str) -> (i32, Vec<CheckResult>) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json);
    let (code, stdout, _) = run(&["verify", "--config", &cfg]);
    (code, serde_json::from_str(&stdout).unwrap())
}

#[test]
fn verify_reports_named_checks() {
    let (code, checks) = verify(r#"{"verify": {"n_mc": 200000, "profiles": 2000}}"#);
    assert!(checks.len() >= 6);
    let failing: Vec<&str> = checks
        .iter()
        .filter(|c| !c.pass)
        .map(|c| c.check_name.as_str())
        .collect();
    // The argmax variance ordering cannot hold for K = 10; see the theory
    // module. Everything else must pass.
    assert!(
        failing
            .iter()
            .all(|n| n.starts_with("variance_ordering_") && n.ends_with("_k10")),
        "{failing:?}"
    );
    assert_eq!(code, if failing.is_empty() { 0 } else { 3 });
}

#[test]
fn corrupted_cdf_fails_flip_checks() {
    let (code, checks) = verify(r#"{"verify": {"n_mc": 200000, "profiles": 500, "cdf_offset": 0.05}}"#);
    assert_eq!(code, 3);
    let flip: Vec<&CheckResult> = checks
        .iter()
        .filter(|c| c.check_name.starts_with("flip_probability_sigma"))
        .collect();
    assert_eq!(flip.len(), 3);
    assert!(flip.iter().all(|c| !c.pass));
}
