//! The run configuration: one JSON document whose defaults are the
//! published training and augmentation settings.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use aortaseg_core::augment::{AugPolicy, PolicyKind};
use aortaseg_core::optim::{AdamState, Optimizer, PlateauConfig, SgdState, TrainLoopConfig};
use aortaseg_core::volio::{IntensityWindow, PhantomSpec, UNIFIED_SPACING_MM};
use aortaseg_core::UNetSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PipelineError, Result};

pub const SGD_LR: f64 = 0.1;
pub const SGD_MOMENTUM: f64 = 0.9;
pub const ADAM_LR: f64 = 0.001;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    U34,
    U28,
    Desk,
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: Preset,
    /// Used only by the custom preset.
    pub depth: usize,
    pub base_features: usize,
    pub feature_cap: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { preset: Preset::Desk, depth: 3, base_features: 8, feature_cap: UNetSpec::DEFAULT_FEATURE_CAP }
    }
}

impl ModelConfig {
    pub fn spec(&self) -> UNetSpec {
        self.spec_for(self.preset)
    }

    pub fn spec_for(&self, preset: Preset) -> UNetSpec {
        let base = match preset {
            Preset::U34 => UNetSpec::u34(),
            Preset::U28 => UNetSpec::u28(),
            Preset::Desk => UNetSpec::desk(),
            Preset::Custom => UNetSpec::new(self.depth, self.base_features),
        };
        UNetSpec { feature_cap: self.feature_cap, ..base }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub sgd_lr: f64,
    pub momentum: f64,
    pub adam_lr: f64,
    pub plateau: PlateauConfig,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { kind: OptimizerKind::Adam, sgd_lr: SGD_LR, momentum: SGD_MOMENTUM, adam_lr: ADAM_LR, plateau: PlateauConfig::default() }
    }
}

impl OptimizerConfig {
    pub fn build(&self) -> Optimizer<f32> {
        match self.kind {
            OptimizerKind::Sgd => Optimizer::Sgd(SgdState::new(self.sgd_lr, self.momentum, self.plateau)),
            OptimizerKind::Adam => Optimizer::Adam(AdamState::new(self.adam_lr)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectConfig {
    pub id: String,
    /// Synthetic subject generated by the `phantom` stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phantom: Option<PhantomSpec>,
    /// Existing image/mask bundles, used instead of a phantom.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    /// Never used as a test subject (e.g. a scan without contrast media).
    #[serde(default)]
    pub exclude_from_test: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocessConfig {
    pub min_size: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self { min_size: aortaseg_core::postrecon::DEFAULT_MIN_SIZE }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub icp_max_iter: usize,
    pub icp_tol: f64,
    pub hist_bins: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { icp_max_iter: 50, icp_tol: 1e-6, hist_bins: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldSpec {
    pub train: Vec<String>,
    pub test: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Explicit folds; leave-one-out over eligible subjects when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub folds: Option<Vec<FoldSpec>>,
    pub policies: Vec<PolicyKind>,
    pub presets: Vec<Preset>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self { folds: None, policies: vec![PolicyKind::Gt, PolicyKind::Rm], presets: vec![Preset::Desk] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub subjects: Vec<SubjectConfig>,
    pub train_subjects: Vec<String>,
    pub test_subject: String,
    /// In-plane spacing every subject is resampled to (mm).
    pub spacing_mm: f64,
    pub intensity: IntensityWindow,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub augmentation: AugPolicy,
    pub training: TrainLoopConfig,
    pub postprocess: PostprocessConfig,
    pub evaluation: EvaluationConfig,
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            subjects: Vec::new(),
            train_subjects: Vec::new(),
            test_subject: String::new(),
            spacing_mm: UNIFIED_SPACING_MM,
            intensity: IntensityWindow::default(),
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            augmentation: AugPolicy::default(),
            training: TrainLoopConfig::default(),
            postprocess: PostprocessConfig::default(),
            evaluation: EvaluationConfig::default(),
            experiment: ExperimentConfig::default(),
        }
    }
}

fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(PipelineError::Config(msg.into()))
}

impl RunConfig {
    /// Parses a config file; relative bundle paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for s in &mut cfg.subjects {
            for p in [&mut s.image, &mut s.mask].into_iter().flatten() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn subject(&self, id: &str) -> Result<&SubjectConfig> {
        self.subjects
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| PipelineError::Config(format!("unknown subject {id:?}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects.is_empty() {
            return config_err("no subjects configured");
        }
        let mut ids = BTreeSet::new();
        for s in &self.subjects {
            if s.id.is_empty() || s.id.contains(['/', '\\']) || s.id.starts_with('.') {
                return config_err(format!("invalid subject id {:?}", s.id));
            }
            if !ids.insert(s.id.as_str()) {
                return config_err(format!("duplicate subject id {:?}", s.id));
            }
            match (&s.phantom, &s.image, &s.mask) {
                (Some(p), None, None) => p.validate().map_err(|e| PipelineError::Config(format!("subject {}: {e}", s.id)))?,
                (None, Some(i), Some(m)) => {
                    for path in [i, m] {
                        if !path.is_dir() {
                            return config_err(format!("subject {}: bundle {} does not exist", s.id, path.display()));
                        }
                    }
                }
                _ => return config_err(format!("subject {} needs either a phantom or both image and mask bundles", s.id)),
            }
        }
        for id in self.train_subjects.iter().chain(std::iter::once(&self.test_subject).filter(|t| !t.is_empty())) {
            self.subject(id)?;
        }
        if self.train_subjects.contains(&self.test_subject) {
            return config_err(format!("test subject {:?} is also a training subject", self.test_subject));
        }
        if !(self.spacing_mm.is_finite() && self.spacing_mm > 0.0) {
            return config_err(format!("spacing {} must be positive", self.spacing_mm));
        }
        if !(self.intensity.lo < self.intensity.hi) {
            return config_err("intensity window lo must be below hi");
        }
        self.model.spec().validate()?;
        let grid = self.augmentation.grid;
        if grid.window % self.model.spec().size_multiple() != 0 {
            return config_err(format!(
                "window {} is not a multiple of {} required by the network depth",
                grid.window,
                self.model.spec().size_multiple()
            ));
        }
        if self.training.batch_size != 1 {
            return config_err("batch size must be 1");
        }
        Ok(())
    }

    /// Canonical JSON of the resolved configuration.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// SHA-256 of [`RunConfig::canonical_json`], hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    pub fn derive_seed(&self, label: &str) -> u64 {
        derive_seed(self.seed, label)
    }
}

/// Stage seed derived from the master seed and a stage label.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_settings() {
        let c = RunConfig::default();
        assert_eq!(c.optimizer.sgd_lr, 0.1);
        assert_eq!(c.optimizer.momentum, 0.9);
        assert_eq!(c.optimizer.adam_lr, 0.001);
        assert_eq!(c.augmentation.grid.window, 512);
        assert_eq!(c.augmentation.grid.stride, 64);
        assert_eq!(c.spacing_mm, 0.645);
        assert_eq!(c.training.batch_size, 1);
        assert_eq!(c.training.max_iterations, 110_000);
        assert_eq!(c.model.spec(), UNetSpec::desk());
        let parsed: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(parsed, c);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sede": 1}"#).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let b = RunConfig { seed: 1, ..RunConfig::default() };
        assert_eq!(a.hash(), RunConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        assert_ne!(derive_seed(0, "init"), derive_seed(0, "train"));
    }

    #[test]
    fn validation() {
        let mut c = RunConfig::default();
        assert!(matches!(c.validate(), Err(PipelineError::Config(_))));
        c.subjects.push(SubjectConfig { id: "A".into(), phantom: Some(PhantomSpec::desk(0)), image: None, mask: None, exclude_from_test: false });
        c.augmentation.grid.window = 64;
        c.validate().unwrap();
        c.train_subjects = vec!["A".into()];
        c.test_subject = "A".into();
        assert!(c.validate().is_err());
        c.test_subject = "Z".into();
        assert!(c.validate().is_err());
        c.test_subject = String::new();
        c.augmentation.grid.window = 60;
        assert!(c.validate().is_err());
    }
}
