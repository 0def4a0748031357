//! Volume bundles, in-plane resampling, slice extraction and the synthetic
//! phantom that stands in for clinical CTA data.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{validation_err, Error, Result};

/// Unified in-plane pixel spacing in mm.
pub const UNIFIED_SPACING_MM: f64 = 0.645;

pub const META_FILE: &str = "meta.json";
pub const VOXEL_FILE: &str = "voxels.raw";

/// Storage type of a bundle. `u8` volumes are binary masks.
pub trait Voxel: Copy + PartialEq + Default + std::fmt::Debug + Send + Sync + 'static {
    const DTYPE: &'static str;
    const BYTES: usize;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    /// Resamples one slice to `(nx, ny)` output pixels at input coordinates `map(i)`.
    fn resample(src: &[Self], sx: usize, sy: usize, xs: &[f64], ys: &[f64]) -> Vec<Self>;
    fn check(self) -> bool {
        true
    }
}

impl Voxel for i16 {
    const DTYPE: &'static str = "i16";
    const BYTES: usize = 2;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(b: &[u8]) -> Self {
        i16::from_le_bytes([b[0], b[1]])
    }

    fn resample(src: &[Self], sx: usize, sy: usize, xs: &[f64], ys: &[f64]) -> Vec<Self> {
        let mut out = Vec::with_capacity(xs.len() * ys.len());
        for &v in ys {
            for &u in xs {
                let val = bilinear(|x, y| f64::from(src[y * sx + x]), sx, sy, u, v);
                out.push(val.round().clamp(f64::from(i16::MIN), f64::from(i16::MAX)) as i16);
            }
        }
        out
    }
}

impl Voxel for u8 {
    const DTYPE: &'static str = "u8";
    const BYTES: usize = 1;

    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }

    fn read_le(b: &[u8]) -> Self {
        b[0]
    }

    fn resample(src: &[Self], sx: usize, sy: usize, xs: &[f64], ys: &[f64]) -> Vec<Self> {
        let near = |c: f64, n: usize| (c.round() as usize).min(n - 1);
        let mut out = Vec::with_capacity(xs.len() * ys.len());
        for &v in ys {
            for &u in xs {
                out.push(u8::from(src[near(v, sy) * sx + near(u, sx)] != 0));
            }
        }
        out
    }

    fn check(self) -> bool {
        self <= 1
    }
}

/// Bilinear interpolation of `f` on an `nx × ny` grid at continuous index `(u, v)`.
pub fn bilinear(f: impl Fn(usize, usize) -> f64, nx: usize, ny: usize, u: f64, v: f64) -> f64 {
    let u = u.clamp(0.0, (nx - 1) as f64);
    let v = v.clamp(0.0, (ny - 1) as f64);
    let (x0, y0) = (u.floor() as usize, v.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(nx - 1), (y0 + 1).min(ny - 1));
    let (fx, fy) = (u - x0 as f64, v - y0 as f64);
    let top = f(x0, y0) * (1.0 - fx) + f(x1, y0) * fx;
    let bottom = f(x0, y1) * (1.0 - fx) + f(x1, y1) * fx;
    top * (1.0 - fy) + bottom * fy
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume<V> {
    dims: [usize; 3],
    spacing: [f64; 3],
    voxels: Vec<V>,
}

pub type ImageVolume = Volume<i16>;
pub type MaskVolume = Volume<u8>;

impl<V: Voxel> Volume<V> {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], voxels: Vec<V>) -> Result<Self> {
        let count = dims.iter().product::<usize>();
        if voxels.len() != count {
            return validation_err(format!("dims {dims:?} need {count} voxels, got {}", voxels.len()));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return validation_err(format!("spacing {spacing:?} must be positive"));
        }
        if let Some(bad) = voxels.iter().find(|v| !v.check()) {
            return validation_err(format!("{} volume holds invalid value {bad:?}", V::DTYPE));
        }
        Ok(Self { dims, spacing, voxels })
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], value: V) -> Result<Self> {
        Self::new(dims, spacing, vec![value; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[V] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<V> {
        self.voxels
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> V {
        self.voxels[self.index(x, y, z)]
    }

    pub fn slice_len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    /// Row-major `y × x` slice `z`.
    pub fn slice(&self, z: usize) -> &[V] {
        let n = self.slice_len();
        &self.voxels[z * n..(z + 1) * n]
    }

    /// Rebuilds a volume from equally sized slices.
    pub fn from_slices(dims_xy: [usize; 2], spacing: [f64; 3], slices: &[Vec<V>]) -> Result<Self> {
        let voxels: Vec<V> = slices.iter().flatten().copied().collect();
        Self::new([dims_xy[0], dims_xy[1], slices.len()], spacing, voxels)
    }
}

impl MaskVolume {
    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v != 0).count()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleMeta {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    dtype: String,
}

pub fn write_bundle<V: Voxel>(v: &Volume<V>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let meta = BundleMeta { dims: v.dims, spacing_mm: v.spacing, dtype: V::DTYPE.into() };
    fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&meta)? + "\n")?;
    let mut raw = Vec::with_capacity(v.voxels.len() * V::BYTES);
    for &x in &v.voxels {
        x.write_le(&mut raw);
    }
    fs::write(dir.join(VOXEL_FILE), raw)?;
    Ok(())
}

/// Data type recorded in a bundle's metadata.
pub fn bundle_dtype(dir: impl AsRef<Path>) -> Result<String> {
    Ok(read_meta(dir.as_ref())?.dtype)
}

fn read_meta(dir: &Path) -> Result<BundleMeta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn read_bundle<V: Voxel>(dir: impl AsRef<Path>) -> Result<Volume<V>> {
    let dir = dir.as_ref();
    let meta = read_meta(dir)?;
    if meta.dtype != V::DTYPE {
        let known = ["i16", "u8"].contains(&meta.dtype.as_str());
        let what = if known { "expected" } else { "unknown dtype, expected" };
        return Err(Error::Format(format!("bundle dtype {:?}: {what} {:?}", meta.dtype, V::DTYPE)));
    }
    let path = dir.join(VOXEL_FILE);
    let raw = fs::read(&path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let want = meta.dims.iter().product::<usize>() * V::BYTES;
    if raw.len() != want {
        return Err(Error::Format(format!("{} holds {} bytes, dims {:?} need {want}", path.display(), raw.len(), meta.dims)));
    }
    let voxels = raw.chunks_exact(V::BYTES).map(V::read_le).collect();
    Volume::new(meta.dims, meta.spacing_mm, voxels)
}

/// Output sample count along an axis of `n` samples at spacing `s` resampled to `t`.
pub fn resampled_len(n: usize, s: f64, t: f64) -> usize {
    if n == 0 {
        return 0;
    }
    ((n - 1) as f64 * s / t + 1e-9).floor() as usize + 1
}

/// Resamples every z-slice to in-plane spacing `target` (bilinear for images,
/// nearest neighbour for masks). Sample `i` sits at physical offset `i·target`.
pub fn resample_xy<V: Voxel>(v: &Volume<V>, target: [f64; 2]) -> Result<Volume<V>> {
    if target.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return validation_err(format!("target spacing {target:?} must be positive"));
    }
    let [sx, sy, sz] = v.spacing;
    if sx == target[0] && sy == target[1] {
        return Ok(v.clone());
    }
    let [nx, ny, nz] = v.dims;
    let (mx, my) = (resampled_len(nx, sx, target[0]), resampled_len(ny, sy, target[1]));
    let xs: Vec<f64> = (0..mx).map(|i| i as f64 * target[0] / sx).collect();
    let ys: Vec<f64> = (0..my).map(|j| j as f64 * target[1] / sy).collect();
    let slices: Vec<Vec<V>> = (0..nz).map(|z| V::resample(v.slice(z), nx, ny, &xs, &ys)).collect();
    Volume::from_slices([mx, my], [target[0], target[1], sz], &slices)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntensityWindow {
    pub lo: f64,
    pub hi: f64,
}

impl Default for IntensityWindow {
    fn default() -> Self {
        Self { lo: -100.0, hi: 500.0 }
    }
}

/// Maps `[lo, hi]` linearly onto `[0, 1]`, clamping outside.
pub fn normalize_intensity(slice: &[f32], window: IntensityWindow) -> Result<Vec<f32>> {
    let IntensityWindow { lo, hi } = window;
    if !(lo < hi) {
        return validation_err(format!("intensity window lo {lo} must be below hi {hi}"));
    }
    Ok(slice.iter().map(|&v| ((f64::from(v) - lo) / (hi - lo)).clamp(0.0, 1.0) as f32).collect())
}

/// Where a training slice came from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub subject: String,
    pub slice: usize,
    /// Augmentation descriptor, e.g. `gt:a=1.05,b=-12,w=(64,128)`; empty when unaugmented.
    pub augmentation: String,
}

/// A 2D image/label pair. The image stays in intensity units until it is
/// normalized for the network.
#[derive(Clone, Debug, PartialEq)]
pub struct SlicePair {
    pub width: usize,
    pub height: usize,
    pub image: Vec<f32>,
    pub label: Vec<u8>,
    pub provenance: Provenance,
}

impl SlicePair {
    pub fn new(width: usize, height: usize, image: Vec<f32>, label: Vec<u8>, provenance: Provenance) -> Result<Self> {
        let n = width * height;
        if image.len() != n || label.len() != n {
            return validation_err(format!("{width}×{height} slice needs {n} pixels, got {} and {}", image.len(), label.len()));
        }
        if label.iter().any(|&l| l > 1) {
            return validation_err("label must be binary");
        }
        Ok(Self { width, height, image, label, provenance })
    }

    pub fn foreground(&self) -> usize {
        self.label.iter().filter(|&&l| l == 1).count()
    }
}

/// Every z-slice of a subject as a [`SlicePair`].
pub fn slice_pairs(image: &ImageVolume, mask: &MaskVolume, subject: &str) -> Result<Vec<SlicePair>> {
    if image.dims != mask.dims {
        return validation_err(format!("image dims {:?} differ from mask dims {:?}", image.dims, mask.dims));
    }
    let [nx, ny, nz] = image.dims;
    (0..nz)
        .map(|z| {
            let prov = Provenance { subject: subject.into(), slice: z, augmentation: String::new() };
            SlicePair::new(nx, ny, image.slice(z).iter().map(|&v| f32::from(v)).collect(), mask.slice(z).to_vec(), prov)
        })
        .collect()
}

/// Lumen radius along the vessel: `base + bulge·exp(−½((t − center)/sigma)²)`
/// with `t ∈ [0, 1]` the relative slice position.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadiusProfile {
    pub base: f64,
    pub bulge: f64,
    pub center: f64,
    pub sigma: f64,
}

impl RadiusProfile {
    pub fn radius(&self, z: usize, n: usize) -> f64 {
        let t = if n > 1 { z as f64 / (n - 1) as f64 } else { 0.5 };
        let s = self.sigma.max(1e-9);
        self.base + self.bulge * (-0.5 * ((t - self.center) / s).powi(2)).exp()
    }
}

/// A labeled-background ellipse beside the vessel (a vein-like structure).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Distractor {
    pub level: f64,
    /// Center relative to the vessel center, in pixels.
    pub offset: [f64; 2],
    pub radii: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub n_slices: usize,
    pub width: usize,
    pub height: usize,
    #[serde(default = "default_spacing")]
    pub spacing_mm: [f64; 3],
    pub radius: RadiusProfile,
    pub background_level: f64,
    pub aorta_level: f64,
    #[serde(default)]
    pub distractors: Vec<Distractor>,
    pub noise_std: f64,
    /// Contrast map `v ↦ a·v + b` applied to every tissue level.
    pub contrast: [f64; 2],
    /// Vessel center relative to the slice center, in pixels.
    pub offset: [f64; 2],
    pub seed: u64,
}

fn default_spacing() -> [f64; 3] {
    [UNIFIED_SPACING_MM, UNIFIED_SPACING_MM, 1.0]
}

impl PhantomSpec {
    /// 32 slices of 64×64, noiseless-contrast subject for quick runs.
    pub fn desk(seed: u64) -> Self {
        Self {
            n_slices: 32,
            width: 64,
            height: 64,
            spacing_mm: default_spacing(),
            radius: RadiusProfile { base: 7.0, bulge: 6.0, center: 0.5, sigma: 0.18 },
            background_level: 40.0,
            aorta_level: 200.0,
            distractors: Vec::new(),
            noise_std: 10.0,
            contrast: [1.0, 0.0],
            offset: [0.0, 0.0],
            seed,
        }
    }

    /// Center of the vessel in pixel coordinates.
    pub fn center(&self) -> [f64; 2] {
        [(self.width as f64 - 1.0) / 2.0 + self.offset[0], (self.height as f64 - 1.0) / 2.0 + self.offset[1]]
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_slices == 0 || self.width == 0 || self.height == 0 {
            return validation_err("phantom needs at least one slice and pixel");
        }
        if self.spacing_mm.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return validation_err(format!("spacing {:?} must be positive", self.spacing_mm));
        }
        if !(self.contrast[0] > 0.0) {
            return validation_err(format!("contrast slope {} must be positive", self.contrast[0]));
        }
        if !(self.noise_std >= 0.0) {
            return validation_err("noise standard deviation must be non-negative");
        }
        let [cx, cy] = self.center();
        let inside = |x: f64, y: f64, rx: f64, ry: f64| {
            x - rx >= 0.0 && y - ry >= 0.0 && x + rx <= (self.width - 1) as f64 && y + ry <= (self.height - 1) as f64
        };
        let r_max = (0..self.n_slices).map(|z| self.radius.radius(z, self.n_slices)).fold(0.0, f64::max);
        let r_min = (0..self.n_slices).map(|z| self.radius.radius(z, self.n_slices)).fold(f64::INFINITY, f64::min);
        if r_min < 1.0 {
            return validation_err(format!("lumen radius {r_min} below one pixel"));
        }
        if !inside(cx, cy, r_max, r_max) {
            return validation_err(format!("disc of radius {r_max:.2} at ({cx:.1}, {cy:.1}) exceeds the slice"));
        }
        for d in &self.distractors {
            let (x, y) = (cx + d.offset[0], cy + d.offset[1]);
            if !inside(x, y, d.radii[0], d.radii[1]) {
                return validation_err(format!("distractor at ({x:.1}, {y:.1}) exceeds the slice"));
            }
            let gap = d.offset[0].hypot(d.offset[1]) - d.radii[0].max(d.radii[1]);
            if gap <= r_max + 1.0 {
                return validation_err("distractor touches the vessel");
            }
        }
        Ok(())
    }
}

/// Pixel `(x, y)` lies in the disc of radius `r` around `c`.
pub fn in_disc(x: usize, y: usize, c: [f64; 2], r: f64) -> bool {
    let (dx, dy) = (x as f64 - c[0], y as f64 - c[1]);
    dx * dx + dy * dy <= r * r
}

fn in_ellipse(x: usize, y: usize, c: [f64; 2], radii: [f64; 2]) -> bool {
    let (dx, dy) = ((x as f64 - c[0]) / radii[0], (y as f64 - c[1]) / radii[1]);
    dx * dx + dy * dy <= 1.0
}

/// Tube-with-bulge phantom: image intensities `a·level + b + noise` and the noiseless vessel mask.
pub fn make_phantom(spec: &PhantomSpec) -> Result<(ImageVolume, MaskVolume)> {
    spec.validate()?;
    let (w, h, n) = (spec.width, spec.height, spec.n_slices);
    let c = spec.center();
    let [a, b] = spec.contrast;
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Validation(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut image = Vec::with_capacity(w * h * n);
    let mut mask = Vec::with_capacity(w * h * n);
    for z in 0..n {
        let r = spec.radius.radius(z, n);
        for y in 0..h {
            for x in 0..w {
                let fg = in_disc(x, y, c, r);
                let level = if fg {
                    spec.aorta_level
                } else {
                    spec.distractors
                        .iter()
                        .find(|d| in_ellipse(x, y, [c[0] + d.offset[0], c[1] + d.offset[1]], d.radii))
                        .map_or(spec.background_level, |d| d.level)
                };
                let n = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                image.push((a * level + b + n).round().clamp(f64::from(i16::MIN), f64::from(i16::MAX)) as i16);
                mask.push(u8::from(fg));
            }
        }
    }
    Ok((Volume::new([w, h, n], spec.spacing_mm, image)?, Volume::new([w, h, n], spec.spacing_mm, mask)?))
}
