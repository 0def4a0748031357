//! One function per pipeline stage. Every stage reads only the artifacts of
//! earlier stages and writes its own under the run layout.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use aortaseg_core::augment::expand;
use aortaseg_core::checkpoint;
use aortaseg_core::evalkit::{c2m_distances, dsc_volume, icp_align, C2mReport, DscReport, IcpOptions, RigidTransform};
use aortaseg_core::optim::{train, LossTrace, TrainSample};
use aortaseg_core::postrecon::{argmax_mask, largest_component, marching_cubes, ComponentStats, Mesh};
use aortaseg_core::unet::build;
use aortaseg_core::volio::{
    make_phantom, normalize_intensity, read_bundle, resample_xy, slice_pairs, write_bundle, ImageVolume, MaskVolume,
    Provenance, Volume, Voxel,
};
use aortaseg_core::{Error as CoreError, Tensor, UNet};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{PipelineError, Result};

/// Where a run keeps its artifacts. Subject data lives under `data`; the
/// model and its outputs under `work` (the same directory for single runs).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub data: PathBuf,
    pub work: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        let root = root.into();
        Self { data: root.clone(), work: root }
    }

    pub fn raw(&self, id: &str) -> PathBuf {
        self.data.join("raw").join(id)
    }

    pub fn resampled(&self, id: &str) -> PathBuf {
        self.data.join("resampled").join(id)
    }

    pub fn augmented(&self) -> PathBuf {
        self.work.join("augmented")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.work.join("model").join("unet.ckpt")
    }

    pub fn loss_csv(&self) -> PathBuf {
        self.work.join("model").join("loss.csv")
    }

    pub fn predicted(&self) -> PathBuf {
        self.work.join("predict").join("mask")
    }

    pub fn postprocessed(&self) -> PathBuf {
        self.work.join("post").join("mask")
    }

    pub fn components(&self) -> PathBuf {
        self.work.join("post").join("components.json")
    }

    pub fn mesh_stl(&self) -> PathBuf {
        self.work.join("mesh").join("surface.stl")
    }

    pub fn mesh_obj(&self) -> PathBuf {
        self.work.join("mesh").join("surface.obj")
    }

    pub fn metrics(&self) -> PathBuf {
        self.work.join("eval").join("metrics.json")
    }

    pub fn timings(&self) -> PathBuf {
        self.work.join("timings.json")
    }
}

fn require(path: &Path, stage: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::Missing { stage, path: path.to_path_buf() })
    }
}

fn read_vol<V: Voxel>(dir: &Path, stage: &'static str) -> Result<Volume<V>> {
    require(&dir.join(aortaseg_core::volio::META_FILE), stage)?;
    Ok(read_bundle(dir)?)
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(PipelineError::io(dir))?;
    }
    fs::write(path, text).map_err(PipelineError::io(path))
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(CoreError::from)? + "\n";
    write_text(path, &text)
}

/// Adds a stage duration to the run's `timings.json`, kept apart from metrics
/// so that metrics stay byte-identical across reruns.
pub fn record_timing(layout: &Layout, stage: &str, started: Instant) -> Result<()> {
    let path = layout.timings();
    let mut all: BTreeMap<String, f64> = fs::read_to_string(&path)
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or_default();
    all.insert(stage.to_string(), started.elapsed().as_secs_f64());
    write_json(&path, &all)
}

/// Echoes the resolved configuration beside the run's outputs.
pub fn write_resolved_config(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    write_text(&layout.work.join("config.resolved.json"), &cfg.canonical_json())
}

fn subject_source(cfg: &RunConfig, layout: &Layout, id: &str) -> Result<(PathBuf, PathBuf)> {
    let s = cfg.subject(id)?;
    Ok(match (&s.image, &s.mask) {
        (Some(i), Some(m)) => (i.clone(), m.clone()),
        _ => (layout.raw(id).join("image"), layout.raw(id).join("mask")),
    })
}

pub fn cmd_phantom(cfg: &RunConfig, layout: &Layout) -> Result<usize> {
    let mut made = 0;
    for s in &cfg.subjects {
        if let Some(spec) = &s.phantom {
            let spec = aortaseg_core::volio::PhantomSpec {
                seed: spec.seed ^ cfg.derive_seed(&format!("phantom/{}", s.id)),
                ..spec.clone()
            };
            let (img, mask) = make_phantom(&spec)?;
            write_bundle(&img, layout.raw(&s.id).join("image"))?;
            write_bundle(&mask, layout.raw(&s.id).join("mask"))?;
            made += 1;
        }
    }
    Ok(made)
}

pub fn cmd_resample(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    let t = [cfg.spacing_mm; 2];
    for s in &cfg.subjects {
        let (img_dir, mask_dir) = subject_source(cfg, layout, &s.id)?;
        let img: ImageVolume = read_vol(&img_dir, "phantom")?;
        let mask: MaskVolume = read_vol(&mask_dir, "phantom")?;
        if img.dims() != mask.dims() {
            return Err(PipelineError::Config(format!("subject {}: image and mask dims differ", s.id)));
        }
        write_bundle(&resample_xy(&img, t)?, layout.resampled(&s.id).join("image"))?;
        write_bundle(&resample_xy(&mask, t)?, layout.resampled(&s.id).join("mask"))?;
    }
    Ok(())
}

fn load_subject(layout: &Layout, id: &str) -> Result<(ImageVolume, MaskVolume)> {
    let dir = layout.resampled(id);
    Ok((read_vol(&dir.join("image"), "resample")?, read_vol(&dir.join("mask"), "resample")?))
}

/// Provenance of every augmented slice, in bundle order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentManifest {
    pub policy: String,
    pub window: usize,
    pub samples: Vec<Provenance>,
}

pub fn cmd_augment(cfg: &RunConfig, layout: &Layout) -> Result<usize> {
    if cfg.train_subjects.is_empty() {
        return Err(PipelineError::Config("no training subjects configured".into()));
    }
    let policy = aortaseg_core::augment::AugPolicy {
        seed: cfg.augmentation.seed ^ cfg.derive_seed("augment"),
        ..cfg.augmentation
    };
    let mut slices: Vec<Vec<i16>> = Vec::new();
    let mut labels: Vec<Vec<u8>> = Vec::new();
    let mut samples = Vec::new();
    let mut spacing = [cfg.spacing_mm, cfg.spacing_mm, 1.0];
    for id in &cfg.train_subjects {
        let (img, mask) = load_subject(layout, id)?;
        spacing = img.spacing();
        for pair in slice_pairs(&img, &mask, id)? {
            for v in expand(&pair, &policy)? {
                // gray-mapped values are stored at the volume's integer precision
                slices.push(v.image.iter().map(|&x| x.round() as i16).collect());
                labels.push(v.label);
                samples.push(v.provenance);
            }
        }
    }
    let w = policy.grid.window;
    let dir = layout.augmented();
    write_bundle(&Volume::from_slices([w, w], spacing, &slices)?, dir.join("image"))?;
    write_bundle(&Volume::from_slices([w, w], spacing, &labels)?, dir.join("mask"))?;
    let manifest = AugmentManifest { policy: policy.kind.label().to_string(), window: w, samples };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest.samples.len())
}

fn to_samples(cfg: &RunConfig, img: &ImageVolume, mask: &MaskVolume) -> Result<Vec<TrainSample<f32>>> {
    let [w, h, n] = img.dims();
    (0..n)
        .map(|z| {
            let raw: Vec<f32> = img.slice(z).iter().map(|&v| f32::from(v)).collect();
            Ok(TrainSample::from_slice(&normalize_intensity(&raw, cfg.intensity)?, mask.slice(z), h, w)?)
        })
        .collect()
}

pub fn cmd_train(cfg: &RunConfig, layout: &Layout) -> Result<LossTrace> {
    let dir = layout.augmented();
    let img: ImageVolume = read_vol(&dir.join("image"), "augment")?;
    let mask: MaskVolume = read_vol(&dir.join("mask"), "augment")?;
    let data = to_samples(cfg, &img, &mask)?;
    let spec = cfg.model.spec();
    let mut net: UNet = build(&spec, cfg.derive_seed("init"))?;
    let mut opt = cfg.optimizer.build();
    let train_cfg = aortaseg_core::optim::TrainLoopConfig { seed: cfg.training.seed ^ cfg.derive_seed("train"), ..cfg.training };
    let model_dir = layout.checkpoint().parent().expect("checkpoint has a parent").to_path_buf();
    fs::create_dir_all(&model_dir).map_err(PipelineError::io(&model_dir))?;
    let last = train_cfg.max_iterations;
    let mut hook = |it: usize, p: &UNet| -> aortaseg_core::Result<()> {
        if it != last {
            checkpoint::save(p, model_dir.join(format!("unet_{it:07}.ckpt")))?;
        }
        Ok(())
    };
    let trace = train(&mut net, &data, &mut opt, &train_cfg, Some(&mut hook))?;
    checkpoint::save(&net, layout.checkpoint())?;
    write_text(&layout.loss_csv(), &trace.to_csv())?;
    Ok(trace)
}

/// Foreground probabilities for every slice of `img`, zero-padding each
/// slice (after normalization) up to the network's size multiple.
pub fn predict_volume(cfg: &RunConfig, net: &UNet, img: &ImageVolume) -> Result<MaskVolume> {
    let [w, h, n] = img.dims();
    let m = net.spec().size_multiple();
    let (pw, ph) = (w.div_ceil(m) * m, h.div_ceil(m) * m);
    let mut probs = Vec::with_capacity(n);
    for z in 0..n {
        let raw: Vec<f32> = img.slice(z).iter().map(|&v| f32::from(v)).collect();
        let norm = normalize_intensity(&raw, cfg.intensity)?;
        let x = Tensor::from_fn((1, 1, ph, pw), |_, _, y, x| if y < h && x < w { norm[y * w + x] } else { 0.0 });
        let p = net.forward(&x)?;
        probs.push(Tensor::from_fn((1, 2, h, w), |_, c, y, x| p.at(0, c, y, x)));
    }
    Ok(argmax_mask(&probs, img.spacing())?)
}

fn test_subject(cfg: &RunConfig) -> Result<&str> {
    if cfg.test_subject.is_empty() {
        return Err(PipelineError::Config("no test subject configured".into()));
    }
    Ok(&cfg.test_subject)
}

pub fn cmd_predict(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    let test = test_subject(cfg)?;
    require(&layout.checkpoint(), "train")?;
    let net: UNet = checkpoint::load_as(layout.checkpoint(), &cfg.model.spec())?;
    let (img, _) = load_subject(layout, test)?;
    write_bundle(&predict_volume(cfg, &net, &img)?, layout.predicted())?;
    Ok(())
}

pub fn cmd_postprocess(cfg: &RunConfig, layout: &Layout) -> Result<ComponentStats> {
    let pred: MaskVolume = read_vol(&layout.predicted(), "predict")?;
    let (clean, stats) = largest_component(&pred, cfg.postprocess.min_size)?;
    write_bundle(&clean, layout.postprocessed())?;
    write_json(&layout.components(), &stats)?;
    Ok(stats)
}

pub fn cmd_reconstruct(_cfg: &RunConfig, layout: &Layout) -> Result<Mesh> {
    let mask: MaskVolume = read_vol(&layout.postprocessed(), "postprocess")?;
    let mesh = marching_cubes(&mask);
    write_text(&layout.mesh_stl(), &mesh.to_stl("aorta"))?;
    write_text(&layout.mesh_obj(), &mesh.to_obj())?;
    Ok(mesh)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SurfaceMetrics {
    pub icp_rms_mm: f64,
    pub icp_iterations: usize,
    pub transform: RigidTransform,
    pub c2m: C2mReport,
}

/// Everything `evaluate` reports; deterministic for a given config and seed.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub config_hash: String,
    pub seed: u64,
    pub test_subject: String,
    pub dsc: DscReport,
    pub components: ComponentStats,
    /// Absent when the prediction or reference has no usable surface.
    pub surface: Option<SurfaceMetrics>,
    pub surface_note: Option<String>,
}

pub fn cmd_evaluate(cfg: &RunConfig, layout: &Layout) -> Result<EvalMetrics> {
    let test = test_subject(cfg)?;
    let pred: MaskVolume = read_vol(&layout.postprocessed(), "postprocess")?;
    require(&layout.mesh_obj(), "reconstruct")?;
    let mesh = Mesh::read_obj(layout.mesh_obj())?;
    let (_, gt) = load_subject(layout, test)?;
    let dsc = dsc_volume(&pred, &gt)?;
    let components: ComponentStats = serde_json::from_str(
        &fs::read_to_string(layout.components()).map_err(PipelineError::io(layout.components()))?,
    )
    .map_err(CoreError::from)?;

    let reference = marching_cubes(&gt);
    let (surface, surface_note) = match surface_metrics(cfg, &mesh, &reference) {
        Ok(s) => (Some(s), None),
        Err(e @ (CoreError::Degenerate(_) | CoreError::Validation(_))) => (None, Some(e.to_string())),
        Err(e) => return Err(e.into()),
    };
    let metrics = EvalMetrics {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        test_subject: test.to_string(),
        dsc,
        components,
        surface,
        surface_note,
    };
    write_json(&layout.metrics(), &metrics)?;
    Ok(metrics)
}

/// Aligns the reconstructed surface's vertices to the ground-truth surface and
/// measures cloud-to-mesh distances.
fn surface_metrics(cfg: &RunConfig, predicted: &Mesh, reference: &Mesh) -> aortaseg_core::Result<SurfaceMetrics> {
    let opts = IcpOptions { max_iter: cfg.evaluation.icp_max_iter, tol: cfg.evaluation.icp_tol };
    let icp = icp_align(&predicted.vertices, reference, opts)?;
    let c2m = c2m_distances(&predicted.vertices, reference, &icp.transform, cfg.evaluation.hist_bins)?;
    Ok(SurfaceMetrics { icp_rms_mm: icp.rms, icp_iterations: icp.history.len() - 1, transform: icp.transform, c2m })
}

/// Stages in pipeline order, by CLI verb.
pub const STAGES: [&str; 8] = ["phantom", "resample", "augment", "train", "predict", "postprocess", "reconstruct", "evaluate"];

/// Runs one stage by name and records its duration.
pub fn run_stage(stage: &str, cfg: &RunConfig, layout: &Layout) -> Result<String> {
    let started = Instant::now();
    let summary = match stage {
        "phantom" => format!("generated {} phantom subject(s)", cmd_phantom(cfg, layout)?),
        "resample" => {
            cmd_resample(cfg, layout)?;
            format!("resampled {} subject(s) to {} mm", cfg.subjects.len(), cfg.spacing_mm)
        }
        "augment" => format!("wrote {} augmented slices", cmd_augment(cfg, layout)?),
        "train" => {
            let t = cmd_train(cfg, layout)?;
            format!("trained {} iterations, final loss {:.4}", t.losses.len(), t.losses.last().copied().unwrap_or(f64::NAN))
        }
        "predict" => {
            cmd_predict(cfg, layout)?;
            format!("predicted subject {}", cfg.test_subject)
        }
        "postprocess" => {
            let s = cmd_postprocess(cfg, layout)?;
            format!("kept {} voxels from {} component(s){}", s.kept_voxels, s.components, if s.empty { " (empty)" } else { "" })
        }
        "reconstruct" => {
            let m = cmd_reconstruct(cfg, layout)?;
            format!("mesh with {} vertices, {} triangles", m.vertices.len(), m.triangles.len())
        }
        "evaluate" => {
            let m = cmd_evaluate(cfg, layout)?;
            format!("DSC {:.4} ± {:.4} over {} slices", m.dsc.mean, m.dsc.std, m.dsc.per_slice.len())
        }
        other => return Err(PipelineError::Config(format!("unknown stage {other:?}"))),
    };
    record_timing(layout, stage, started)?;
    Ok(summary)
}
