use std::path::{Path, PathBuf};
use std::process::Command;

use aortaseg::config::{FoldSpec, RunConfig};
use aortaseg::stages::{run_stage, Layout, STAGES};
use aortaseg::{cmd_crossval, ExperimentPlan, PipelineError};

fn tiny(out: &Path) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.json");
    let mut cfg = RunConfig::load(&path).unwrap();
    cfg.out_dir = out.to_path_buf();
    cfg
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_aortaseg"))
}

fn config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.json")
}

#[test]
fn every_stage_runs_and_leaves_its_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let layout = Layout::new(dir.path());
    for stage in STAGES {
        run_stage(stage, &cfg, &layout).unwrap();
    }
    for p in [layout.checkpoint(), layout.loss_csv(), layout.mesh_stl(), layout.mesh_obj(), layout.metrics(), layout.timings()] {
        assert!(p.exists(), "{} missing", p.display());
    }
    let stl = std::fs::read_to_string(layout.mesh_stl()).unwrap();
    assert!(stl.starts_with("solid") && stl.contains("facet normal"));
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(layout.metrics()).unwrap()).unwrap();
    assert_eq!(metrics["config_hash"], cfg.hash());
    assert!(metrics["dsc"]["mean"].as_f64().unwrap() > 0.5);
    assert!(metrics.get("timings").is_none());
}

#[test]
fn rerun_reproduces_metrics_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let layout = Layout::new(dir.path());
    let mut runs = Vec::new();
    for _ in 0..2 {
        // a fresh tree each time, so nothing is reused from the previous run
        std::fs::remove_dir_all(dir.path()).unwrap();
        for stage in STAGES {
            run_stage(stage, &cfg, &layout).unwrap();
        }
        runs.push((std::fs::read(layout.metrics()).unwrap(), std::fs::read(layout.checkpoint()).unwrap()));
    }
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn predict_without_checkpoint_names_the_training_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let layout = Layout::new(dir.path());
    for stage in ["phantom", "resample"] {
        run_stage(stage, &cfg, &layout).unwrap();
    }
    let err = run_stage("predict", &cfg, &layout).unwrap_err();
    assert!(matches!(&err, PipelineError::Missing { stage, .. } if *stage == "train"), "{err}");
    assert_eq!(err.exit_code(), 3);

    let out = bin().args(["predict", "--config"]).arg(config_path()).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train"));
}

#[test]
fn cli_reports_config_errors_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"seed": 1, "no_such_field": true}"#).unwrap();
    let out = bin().args(["phantom", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().arg("train").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn cli_seed_override_changes_the_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().args(["phantom", "--seed", "77", "--config"]).arg(config_path()).arg("--out").arg(dir.path()).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let resolved: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("config.resolved.json")).unwrap()).unwrap();
    assert_eq!(resolved["seed"], 77);
}

#[test]
fn fold_testing_on_a_training_subject_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.experiment.folds = Some(vec![FoldSpec { train: vec!["s1".into(), "s3".into()], test: "s3".into() }]);
    let err = ExperimentPlan::from_config(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("s3"));
}

#[test]
fn leave_one_out_over_three_subjects_gives_three_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.training.max_iterations = 20;
    let plan = ExperimentPlan::from_config(&cfg).unwrap();
    assert_eq!(plan.folds.len(), 3);
    assert!(plan.folds.iter().all(|f| !f.train.contains(&f.test) && f.train.len() == 2));
    let manifest = cmd_crossval(&cfg, &Layout::new(dir.path())).unwrap();
    let per_fold: Vec<_> = manifest.summary.iter().filter(|r| r.test != aortaseg::crossval::POOLED).collect();
    assert_eq!(per_fold.len(), 3);
    assert_eq!(manifest.summary.len(), 4);
    assert_eq!(manifest.to_markdown().lines().count(), 2 + 4);
}

#[test]
fn excluded_subjects_are_never_tested() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.subjects[0].exclude_from_test = true;
    let plan = ExperimentPlan::from_config(&cfg).unwrap();
    assert_eq!(plan.folds.len(), 2);
    assert!(plan.folds.iter().all(|f| f.test != "s1" && f.train.contains(&"s1".to_string())));
}
