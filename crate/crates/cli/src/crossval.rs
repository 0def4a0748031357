//! Cross-validation runner producing a per-fold, per-policy DSC table.

use std::fmt::Write as _;
use std::time::Instant;

use aortaseg_core::augment::PolicyKind;
use aortaseg_core::evalkit::DscReport;
use serde::Serialize;

use crate::config::{FoldSpec, Preset, RunConfig};
use crate::error::{PipelineError, Result};
use crate::stages::{cmd_evaluate, record_timing, run_stage, write_json, write_text, EvalMetrics, Layout};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Fold {
    pub name: String,
    pub train: Vec<String>,
    pub test: String,
    pub policy: PolicyKind,
    pub preset: Preset,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ExperimentPlan {
    pub folds: Vec<Fold>,
}

fn policy_tag(p: PolicyKind) -> &'static str {
    match p {
        PolicyKind::Gt => "gt",
        PolicyKind::Rm => "rm",
    }
}

fn preset_tag(p: Preset) -> &'static str {
    match p {
        Preset::U34 => "u34",
        Preset::U28 => "u28",
        Preset::Desk => "desk",
        Preset::Custom => "custom",
    }
}

impl ExperimentPlan {
    /// Explicit folds from the config, or leave-one-out over every subject
    /// not excluded from testing; crossed with each policy and preset.
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let base: Vec<FoldSpec> = match &cfg.experiment.folds {
            Some(f) => f.clone(),
            None => cfg
                .subjects
                .iter()
                .filter(|s| !s.exclude_from_test)
                .map(|t| FoldSpec {
                    train: cfg.subjects.iter().filter(|s| s.id != t.id).map(|s| s.id.clone()).collect(),
                    test: t.id.clone(),
                })
                .collect(),
        };
        let mut folds = Vec::new();
        for (k, f) in base.iter().enumerate() {
            for &preset in &cfg.experiment.presets {
                for &policy in &cfg.experiment.policies {
                    folds.push(Fold {
                        name: format!("fold{k}_{}_{}_{}", f.test, policy_tag(policy), preset_tag(preset)),
                        train: f.train.clone(),
                        test: f.test.clone(),
                        policy,
                        preset,
                    });
                }
            }
        }
        let plan = Self { folds };
        plan.validate(cfg)?;
        Ok(plan)
    }

    pub fn validate(&self, cfg: &RunConfig) -> Result<()> {
        if self.folds.is_empty() {
            return Err(PipelineError::Config("experiment plan has no folds".into()));
        }
        for f in &self.folds {
            if f.train.is_empty() {
                return Err(PipelineError::Config(format!("{}: no training subjects", f.name)));
            }
            if f.train.contains(&f.test) {
                return Err(PipelineError::Config(format!("{}: test subject {} is in its own training set", f.name, f.test)));
            }
            for id in f.train.iter().chain([&f.test]) {
                cfg.subject(id)?;
            }
            if cfg.subject(&f.test)?.exclude_from_test {
                return Err(PipelineError::Config(format!("{}: subject {} is excluded from testing", f.name, f.test)));
            }
        }
        Ok(())
    }

    /// Run configuration of one fold.
    pub fn fold_config(cfg: &RunConfig, fold: &Fold) -> RunConfig {
        let mut c = cfg.clone();
        c.train_subjects = fold.train.clone();
        c.test_subject = fold.test.clone();
        c.augmentation.kind = fold.policy;
        c.model.preset = fold.preset;
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FoldResult {
    pub fold: Fold,
    pub layers: usize,
    pub metrics: EvalMetrics,
}

/// One row of the summary table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub train: String,
    pub test: String,
    pub augmentation: String,
    pub layers: usize,
    pub dsc_mean: f64,
    pub dsc_std: f64,
    pub slices: usize,
}

impl SummaryRow {
    fn new(train: String, test: String, policy: PolicyKind, layers: usize, dsc: &DscReport) -> Self {
        Self {
            train,
            test,
            augmentation: policy.label().to_string(),
            layers,
            dsc_mean: dsc.mean,
            dsc_std: dsc.std,
            slices: dsc.per_slice.len(),
        }
    }
}

/// Cross-validation output. Timings are written separately.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsManifest {
    pub config_hash: String,
    pub seed: u64,
    pub folds: Vec<FoldResult>,
    /// One row per fold, then pooled rows per policy and preset.
    pub summary: Vec<SummaryRow>,
}

impl MetricsManifest {
    pub fn row(&self, test: &str, policy: PolicyKind) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.test == test && r.augmentation == policy.label())
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Train Subject | Test Subject | Augmentation | Layer Num. | DSC avg.±std |\n");
        s.push_str("|---|---|---|---|---|\n");
        for r in &self.summary {
            let _ = writeln!(s, "| {} | {} | {} | {} | {:.3}±{:.3} |", r.train, r.test, r.augmentation, r.layers, r.dsc_mean, r.dsc_std);
        }
        s
    }
}

pub const POOLED: &str = "pooled";

/// Generates and resamples every subject once, then runs each fold from
/// augmentation to evaluation in its own directory under `crossval/`.
pub fn cmd_crossval(cfg: &RunConfig, layout: &Layout) -> Result<MetricsManifest> {
    let plan = ExperimentPlan::from_config(cfg)?;
    let started = Instant::now();
    for stage in ["phantom", "resample"] {
        run_stage(stage, cfg, layout)?;
    }
    let root = layout.work.join("crossval");
    let mut folds = Vec::new();
    for fold in &plan.folds {
        let fcfg = ExperimentPlan::fold_config(cfg, fold);
        fcfg.validate()?;
        let flayout = Layout { data: layout.data.clone(), work: root.join(&fold.name) };
        for stage in ["augment", "train", "predict", "postprocess", "reconstruct"] {
            run_stage(stage, &fcfg, &flayout)?;
        }
        let t = Instant::now();
        let metrics = cmd_evaluate(&fcfg, &flayout)?;
        record_timing(&flayout, "evaluate", t)?;
        folds.push(FoldResult { fold: fold.clone(), layers: fcfg.model.spec().counted_layers(), metrics });
    }

    let mut summary: Vec<SummaryRow> = folds
        .iter()
        .map(|f| SummaryRow::new(f.fold.train.join("+"), f.fold.test.clone(), f.fold.policy, f.layers, &f.metrics.dsc))
        .collect();
    for &preset in &cfg.experiment.presets {
        for &policy in &cfg.experiment.policies {
            let group: Vec<&FoldResult> = folds.iter().filter(|f| f.fold.policy == policy && f.fold.preset == preset).collect();
            if group.len() > 1 {
                let pooled = DscReport::pooled(&group.iter().map(|f| &f.metrics.dsc).collect::<Vec<_>>());
                summary.push(SummaryRow::new("all folds".into(), POOLED.into(), policy, group[0].layers, &pooled));
            }
        }
    }
    let manifest = MetricsManifest { config_hash: cfg.hash(), seed: cfg.seed, folds, summary };
    write_json(&root.join("metrics.json"), &manifest)?;
    write_text(&root.join("summary.md"), &manifest.to_markdown())?;
    record_timing(layout, "crossval", started)?;
    Ok(manifest)
}
