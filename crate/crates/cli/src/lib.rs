//! Staged pipeline from phantom (or bundle) volumes to segmentations, meshes
//! and metrics, plus the cross-validation runner and verification harness.

pub mod config;
pub mod crossval;
pub mod error;
pub mod gradcheck;
pub mod stages;

pub use config::RunConfig;
pub use crossval::{cmd_crossval, ExperimentPlan, MetricsManifest};
pub use error::{PipelineError, Result};
pub use stages::Layout;
