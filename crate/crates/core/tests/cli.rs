use std::fs;
use std::path::Path;
use std::process::Command;

use pdalab::cli::{
    cmd_ablate, cmd_bound_trace, cmd_eval, cmd_generate_data, cmd_train, read_metrics, ABLATION_FILE,
    ABLATION_RUNS_FILE, BOUND_TRACE_COLUMNS, CONFUSION_FILE, CONFIG_FILE, META_FILE, METRICS_FILE, MODEL_FILE,
    SOURCE_FILE, STEP_LOSSES_FILE, TARGET_FILE, TARGET_ORACLE_FILE, TIMINGS_FILE,
};
use pdalab::config::{CsvPaths, DataSource, RunConfig, VariantSpec};
use pdalab::data::load_csv;
use pdalab::trainer::{MetricsRecord, Preset};
use pdalab::Error;

fn small_config(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        output_dir: dir.to_path_buf(),
        ..RunConfig::default()
    };
    if let DataSource::Synthetic(spec) = &mut cfg.data {
        spec.samples_per_class = 20;
    }
    cfg.schedule.total_epochs = 3;
    cfg.schedule.warmup_epochs = 1;
    cfg
}

#[test]
fn generate_data_writes_expected_rows_deterministically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        cmd_generate_data(&small_config(dir)).unwrap();
    }
    let source = load_csv(&a.path().join(SOURCE_FILE)).unwrap();
    let target = load_csv(&a.path().join(TARGET_FILE)).unwrap();
    let oracle = load_csv(&a.path().join(TARGET_ORACLE_FILE)).unwrap();
    assert_eq!(source.len(), 5 * 20);
    assert_eq!(target.len(), 3 * 20);
    assert!(target.samples.iter().all(|s| s.y.is_none()));
    assert!(oracle.samples.iter().all(|s| matches!(s.y, Some(0..=2))));
    for f in [SOURCE_FILE, TARGET_FILE, TARGET_ORACLE_FILE, META_FILE] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn invalid_shared_set_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("data");
    let mut cfg = small_config(&out);
    if let DataSource::Synthetic(spec) = &mut cfg.data {
        spec.shared_classes = vec![1, 7];
    }
    assert!(cmd_generate_data(&cfg).is_err());
    assert!(!out.exists());
}

#[test]
fn train_writes_all_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let last = cmd_train(&cfg).unwrap();
    for f in [CONFIG_FILE, METRICS_FILE, TIMINGS_FILE, STEP_LOSSES_FILE, CONFUSION_FILE, MODEL_FILE] {
        assert!(tmp.path().join(f).is_file(), "{f} missing");
    }
    let records = read_metrics(&tmp.path().join(METRICS_FILE)).unwrap();
    assert_eq!(records.len(), cfg.schedule.total_epochs + 1);
    assert_eq!(records.last().unwrap(), &last);
    // the stored config reproduces the run
    let saved = RunConfig::load(&tmp.path().join(CONFIG_FILE)).unwrap();
    assert_eq!(saved, cfg);
}

#[test]
fn source_only_has_zero_adversarial_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        variant: VariantSpec::Preset(Preset::SourceOnly),
        ..small_config(tmp.path())
    };
    cmd_train(&cfg).unwrap();
    for r in read_metrics(&tmp.path().join(METRICS_FILE)).unwrap() {
        assert_eq!(r.losses.l_adv, 0.0);
    }
    let text = fs::read_to_string(tmp.path().join(STEP_LOSSES_FILE)).unwrap();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[3].parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn san_pp_filters_outlier_classes_over_training() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        output_dir: tmp.path().to_path_buf(),
        ..RunConfig::default()
    };
    cmd_train(&cfg).unwrap();
    let records = read_metrics(&tmp.path().join(METRICS_FILE)).unwrap();
    let (first, last) = (&records[1], records.last().unwrap());
    for outlier in [3, 4] {
        assert!(last.w[outlier] < first.w[outlier], "class {outlier}: {} -> {}", first.w[outlier], last.w[outlier]);
    }
}

#[test]
fn bound_trace_has_one_row_per_epoch() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    cmd_train(&cfg).unwrap();
    let table = cmd_bound_trace(&tmp.path().join(METRICS_FILE)).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next().unwrap(), BOUND_TRACE_COLUMNS.join(","));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), cfg.schedule.total_epochs + 1);
    for (i, row) in rows.iter().enumerate() {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols.len(), BOUND_TRACE_COLUMNS.len());
        assert_eq!(cols[0], i.to_string());
        let lhs: f64 = cols[1].parse().unwrap();
        let rhs: f64 = cols[7].parse().unwrap();
        assert!(lhs <= rhs + 1e-9);
    }
}

#[test]
fn bound_trace_rejects_foreign_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    cmd_train(&cfg).unwrap();
    let path = tmp.path().join(METRICS_FILE);
    let text = fs::read_to_string(&path).unwrap().replacen("\"1.0\"", "\"2.0\"", 1);
    fs::write(&path, text).unwrap();
    match cmd_bound_trace(&path) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
        other => panic!("expected a parse error, got {other:?}"),
    }
    assert!(MetricsRecord::from_json_line("{}").is_err());
}

#[test]
fn ablation_is_deterministic_and_covers_every_row() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let rows_a = cmd_ablate(&small_config(a.path()), 1, Some(1)).unwrap();
    let rows_b = cmd_ablate(&small_config(b.path()), 1, Some(1)).unwrap();
    let names: Vec<Preset> = rows_a.iter().map(|r| r.variant).collect();
    assert_eq!(names, Preset::ABLATION_ROWS.to_vec());
    assert_eq!(rows_a, rows_b);
    for f in [ABLATION_FILE, ABLATION_RUNS_FILE] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
    }
    assert!(rows_a.iter().all(|r| r.std == 0.0 && r.accuracies.len() == 1));
}

#[test]
fn eval_matches_training_confusion() {
    let tmp = tempfile::tempdir().unwrap();
    let data_dir = tmp.path().join("data");
    let run_dir = tmp.path().join("run");
    cmd_generate_data(&small_config(&data_dir)).unwrap();
    let cfg = RunConfig {
        data: DataSource::Csv(CsvPaths {
            source: data_dir.join(SOURCE_FILE),
            target: data_dir.join(TARGET_FILE),
            target_labels: data_dir.join(TARGET_ORACLE_FILE),
            meta: data_dir.join(META_FILE),
        }),
        ..small_config(&run_dir)
    };
    let last = cmd_train(&cfg).unwrap();
    let (acc, confusion) = cmd_eval(&run_dir.join(MODEL_FILE), &data_dir.join(TARGET_ORACLE_FILE)).unwrap();
    assert_eq!(acc, last.target_accuracy);
    let total: usize = confusion.iter().flatten().sum();
    assert_eq!(total, 60);
}

#[test]
fn csv_data_trains_like_synthetic() {
    let tmp = tempfile::tempdir().unwrap();
    let data_dir = tmp.path().join("data");
    cmd_generate_data(&small_config(&data_dir)).unwrap();
    let csv_cfg = RunConfig {
        data: DataSource::Csv(CsvPaths {
            source: data_dir.join(SOURCE_FILE),
            target: data_dir.join(TARGET_FILE),
            target_labels: data_dir.join(TARGET_ORACLE_FILE),
            meta: data_dir.join(META_FILE),
        }),
        ..small_config(&tmp.path().join("csv"))
    };
    let a = cmd_train(&csv_cfg).unwrap();
    let b = cmd_train(&small_config(&tmp.path().join("syn"))).unwrap();
    assert_eq!(a, b);
}

#[test]
fn malformed_csv_reports_line() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.csv");
    fs::write(&path, "x0,x1,y,domain\n0.1,0.2,1,1\n0.3,oops,0,1\n").unwrap();
    match load_csv(&path) {
        Err(Error::Parse { line, msg, .. }) => {
            assert_eq!(line, 3);
            assert!(msg.contains("oops"));
        }
        other => panic!("expected a parse error, got {other:?}"),
    }
    fs::write(&path, "a,b,domain\n").unwrap();
    assert!(matches!(load_csv(&path), Err(Error::Format { .. })));
    fs::write(&path, "x0,y,domain\n0.5,,1\n").unwrap();
    assert!(load_csv(&path).is_err());
}

#[test]
fn binary_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("run.toml");
    small_config(&tmp.path().join("run")).save(&cfg_path).unwrap();
    let bin = env!("CARGO_BIN_EXE_pdalab");
    let train = Command::new(bin)
        .args(["train", "--variant", "dann", "--config"])
        .arg(&cfg_path)
        .output()
        .unwrap();
    assert!(train.status.success());
    assert!(String::from_utf8(train.stdout).unwrap().starts_with("epoch 3 target accuracy"));
    let out = Command::new(bin)
        .arg("bound-trace")
        .arg(tmp.path().join("run").join(METRICS_FILE))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("epoch,w_error_l1"));

    let bad = Command::new(bin)
        .args(["train", "--config"])
        .arg(tmp.path().join("missing.toml"))
        .output()
        .unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8(bad.stderr).unwrap().starts_with("error:"));
}
