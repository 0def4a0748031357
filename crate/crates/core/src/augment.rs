//! Training-set expansion: gray-value variation with translated windows
//! (G.&T.) and the eight rotation/mirror variants (R.&M.).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{validation_err, Result};
use crate::volio::SlicePair;

/// Intensity range representable by the 16-bit volumes.
pub const INTENSITY_RANGE: (f32, f32) = (i16::MIN as f32, i16::MAX as f32);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrayMap {
    pub a: f64,
    pub b: f64,
}

impl GrayMap {
    pub const IDENTITY: Self = Self { a: 1.0, b: 0.0 };
}

/// `v ↦ clamp(a·v + b)` on an image slice.
pub fn apply_gray(image: &[f32], m: GrayMap) -> Result<Vec<f32>> {
    if !(m.a > 0.0) {
        return validation_err(format!("gray slope {} must be positive", m.a));
    }
    let (lo, hi) = INTENSITY_RANGE;
    Ok(image.iter().map(|&v| ((m.a * f64::from(v) + m.b) as f32).clamp(lo, hi)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowGrid {
    pub window: usize,
    pub stride: usize,
}

impl Default for WindowGrid {
    fn default() -> Self {
        Self { window: 512, stride: 64 }
    }
}

impl WindowGrid {
    /// Window positions along one axis of length `extent`.
    pub fn count(&self, extent: usize) -> Result<usize> {
        if self.window == 0 || self.stride == 0 {
            return validation_err("window and stride must be positive");
        }
        if extent < self.window {
            return validation_err(format!("extent {extent} is below the minimum {} required by the window", self.window));
        }
        Ok((extent - self.window) / self.stride + 1)
    }

    /// Grid origin closest to the centered window (lower origin on ties).
    pub fn center_origin(&self, width: usize, height: usize) -> Result<(usize, usize)> {
        let axis = |extent: usize| -> Result<usize> {
            let n = self.count(extent)?;
            let ideal = (extent - self.window) as f64 / 2.0;
            let k = (0..n).min_by(|&i, &j| {
                let (di, dj) = (((i * self.stride) as f64 - ideal).abs(), ((j * self.stride) as f64 - ideal).abs());
                di.total_cmp(&dj)
            });
            Ok(k.unwrap_or(0) * self.stride)
        };
        Ok((axis(width)?, axis(height)?))
    }
}

/// Row-major list of window origins `(x0, y0)`.
pub fn enumerate_windows(width: usize, height: usize, grid: WindowGrid) -> Result<Vec<(usize, usize)>> {
    let (nx, ny) = (grid.count(width)?, grid.count(height)?);
    Ok((0..ny).flat_map(|j| (0..nx).map(move |i| (i * grid.stride, j * grid.stride))).collect())
}

/// Square crop of side `size` at `(x0, y0)`; the caller checks bounds.
pub fn crop(pair: &SlicePair, x0: usize, y0: usize, size: usize) -> Result<SlicePair> {
    if x0 + size > pair.width || y0 + size > pair.height {
        return validation_err(format!("crop {size} at ({x0}, {y0}) exceeds {}×{}", pair.width, pair.height));
    }
    let mut image = Vec::with_capacity(size * size);
    let mut label = Vec::with_capacity(size * size);
    for y in y0..y0 + size {
        let row = y * pair.width;
        image.extend_from_slice(&pair.image[row + x0..row + x0 + size]);
        label.extend_from_slice(&pair.label[row + x0..row + x0 + size]);
    }
    SlicePair::new(size, size, image, label, pair.provenance.clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    /// Gray-value variation plus translation.
    Gt,
    /// Rotation plus mirroring.
    Rm,
}

impl PolicyKind {
    pub fn label(self) -> &'static str {
        match self {
            Self::Gt => "G.&T.",
            Self::Rm => "R.&M.",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugPolicy {
    pub kind: PolicyKind,
    pub gray_variants: usize,
    pub a_range: [f64; 2],
    pub b_range: [f64; 2],
    pub grid: WindowGrid,
    pub seed: u64,
}

impl Default for AugPolicy {
    fn default() -> Self {
        Self { kind: PolicyKind::Gt, gray_variants: 8, a_range: [0.8, 1.2], b_range: [-100.0, 100.0], grid: WindowGrid::default(), seed: 0 }
    }
}

impl AugPolicy {
    fn validate(&self) -> Result<()> {
        let [a0, a1] = self.a_range;
        let [b0, b1] = self.b_range;
        if !(a0 > 0.0 && a0 <= a1) || !(b0 <= b1) {
            return validation_err(format!("invalid gray ranges a {:?}, b {:?}", self.a_range, self.b_range));
        }
        if self.gray_variants == 0 {
            return validation_err("at least one gray variant is required");
        }
        Ok(())
    }

    /// Gray maps for one slice; the first is always the identity.
    pub fn gray_maps(&self, subject: &str, slice: usize) -> Vec<GrayMap> {
        let mut rng = ChaCha8Rng::seed_from_u64(slice_seed(self.seed, subject, slice));
        let mut maps = vec![GrayMap::IDENTITY];
        while maps.len() < self.gray_variants {
            let a = rng.random_range(self.a_range[0]..=self.a_range[1]);
            let b = rng.random_range(self.b_range[0]..=self.b_range[1]);
            maps.push(GrayMap { a, b });
        }
        maps.truncate(self.gray_variants);
        maps
    }
}

/// Mixes the policy seed with the slice identity so every slice draws its own gray maps.
pub fn slice_seed(seed: u64, subject: &str, slice: usize) -> u64 {
    // FNV-1a over the subject, then a splitmix64 finalizer
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for byte in subject.bytes() {
        h = (h ^ u64::from(byte)).wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h.rotate_left(17) ^ (slice as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fmt_num(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

/// Gray variants × windows. Windows are ordered center first, then
/// row-major; gray variant 0 is the identity, so output 0 is the plain center crop.
pub fn expand_gt(pair: &SlicePair, policy: &AugPolicy) -> Result<Vec<SlicePair>> {
    policy.validate()?;
    let grid = policy.grid;
    let center = grid.center_origin(pair.width, pair.height)?;
    let mut origins = vec![center];
    origins.extend(enumerate_windows(pair.width, pair.height, grid)?.into_iter().filter(|&o| o != center));
    let maps = policy.gray_maps(&pair.provenance.subject, pair.provenance.slice);
    let crops = origins.iter().map(|&(x, y)| crop(pair, x, y, grid.window)).collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(maps.len() * crops.len());
    for m in &maps {
        for (c, &(x0, y0)) in crops.iter().zip(&origins) {
            let mut v = c.clone();
            v.image = apply_gray(&c.image, *m)?;
            v.provenance.augmentation = format!("gt:a={},b={},w=({x0},{y0})", fmt_num(m.a), fmt_num(m.b));
            out.push(v);
        }
    }
    Ok(out)
}

/// Element of the dihedral group of the square: `mirror` (x ↦ n−1−x) first,
/// then `quarter_turns` counter-clockwise rotations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dihedral {
    pub quarter_turns: u8,
    pub mirror: bool,
}

impl Dihedral {
    pub const ALL: [Self; 8] = {
        let mut all = [Self { quarter_turns: 0, mirror: false }; 8];
        let mut k = 0;
        while k < 8 {
            all[k] = Self { quarter_turns: (k % 4) as u8, mirror: k >= 4 };
            k += 1;
        }
        all
    };

    /// Destination of pixel `(x, y)` in an `n × n` slice.
    pub fn map(self, x: usize, y: usize, n: usize) -> (usize, usize) {
        let (mut x, mut y) = if self.mirror { (n - 1 - x, y) } else { (x, y) };
        for _ in 0..self.quarter_turns {
            (x, y) = (y, n - 1 - x);
        }
        (x, y)
    }

    fn permute<T: Copy + Default>(self, src: &[T], n: usize, inverse: bool) -> Vec<T> {
        let mut out = vec![T::default(); n * n];
        for y in 0..n {
            for x in 0..n {
                let (u, v) = self.map(x, y, n);
                if inverse {
                    out[y * n + x] = src[v * n + u];
                } else {
                    out[v * n + u] = src[y * n + x];
                }
            }
        }
        out
    }

    pub fn apply(self, pair: &SlicePair) -> Result<SlicePair> {
        self.transform(pair, false)
    }

    pub fn apply_inverse(self, pair: &SlicePair) -> Result<SlicePair> {
        self.transform(pair, true)
    }

    fn transform(self, pair: &SlicePair, inverse: bool) -> Result<SlicePair> {
        let n = pair.width;
        if pair.height != n {
            return validation_err(format!("rotation needs a square slice, got {}×{}", pair.width, pair.height));
        }
        let mut out = SlicePair::new(n, n, self.permute(&pair.image, n, inverse), self.permute(&pair.label, n, inverse), pair.provenance.clone())?;
        out.provenance.augmentation = self.descriptor();
        Ok(out)
    }

    pub fn descriptor(self) -> String {
        format!("rm:rot={},mirror={}", 90 * u32::from(self.quarter_turns), u8::from(self.mirror))
    }
}

/// The eight dihedral variants of a square slice, identity first.
pub fn expand_rm(pair: &SlicePair, _policy: &AugPolicy) -> Result<Vec<SlicePair>> {
    Dihedral::ALL.iter().map(|d| d.apply(pair)).collect()
}

/// Expansion used for training sets: G.&T. as [`expand_gt`]; R.&M. on the
/// center window, so both policies yield crops of the same size.
pub fn expand(pair: &SlicePair, policy: &AugPolicy) -> Result<Vec<SlicePair>> {
    match policy.kind {
        PolicyKind::Gt => expand_gt(pair, policy),
        PolicyKind::Rm => {
            let (x0, y0) = policy.grid.center_origin(pair.width, pair.height)?;
            expand_rm(&crop(pair, x0, y0, policy.grid.window)?, policy)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volio::Provenance;

    fn pair(w: usize, h: usize) -> SlicePair {
        let image = (0..w * h).map(|i| i as f32).collect();
        let label = (0..w * h).map(|i| u8::from(i % 3 == 0)).collect();
        SlicePair::new(w, h, image, label, Provenance { subject: "s".into(), slice: 2, augmentation: String::new() }).unwrap()
    }

    #[test]
    fn gray_formula_and_clamp() {
        assert_eq!(apply_gray(&[100.0, -5.0], GrayMap::IDENTITY).unwrap(), vec![100.0, -5.0]);
        assert_eq!(apply_gray(&[100.0], GrayMap { a: 1.2, b: -10.0 }).unwrap(), vec![110.0]);
        assert_eq!(apply_gray(&[0.0, 3000.0], GrayMap { a: 1.0, b: 1e6 }).unwrap(), vec![32767.0; 2]);
        assert!(apply_gray(&[0.0], GrayMap { a: 0.0, b: 0.0 }).is_err());
    }

    #[test]
    fn window_counts() {
        let g = WindowGrid::default();
        assert_eq!(enumerate_windows(512, 512, g).unwrap(), vec![(0, 0)]);
        assert_eq!(enumerate_windows(640, 640, g).unwrap().len(), 9);
        assert_eq!(enumerate_windows(576, 512, g).unwrap(), vec![(0, 0), (64, 0)]);
        let err = enumerate_windows(500, 512, g).unwrap_err().to_string();
        assert!(err.contains("512"), "{err}");
    }

    #[test]
    fn gt_expansion_counts_and_identity_first() {
        let policy = AugPolicy { grid: WindowGrid { window: 8, stride: 1 }, ..AugPolicy::default() };
        let p = pair(10, 10);
        let out = expand_gt(&p, &policy).unwrap();
        assert_eq!(out.len(), 8 * 9);
        assert_eq!(out[0].image, crop(&p, 1, 1, 8).unwrap().image);
        assert_eq!(out[0].provenance.augmentation, "gt:a=1,b=0,w=(1,1)");
        // labels are cropped but never gray-mapped
        for (k, v) in out.iter().enumerate() {
            let base = &out[k % 9];
            assert_eq!(v.label, base.label);
        }
        assert_eq!(out, expand_gt(&p, &policy).unwrap());
        let other = Provenance { slice: 3, ..p.provenance.clone() };
        let shifted = expand_gt(&SlicePair { provenance: other, ..p.clone() }, &policy).unwrap();
        assert_ne!(shifted[9].image, out[9].image);
    }

    #[test]
    fn dihedral_group() {
        let p = pair(5, 5);
        for d in Dihedral::ALL {
            let q = d.apply(&p).unwrap();
            assert_eq!(q.foreground(), p.foreground());
            assert_eq!(d.apply_inverse(&q).unwrap().image, p.image);
        }
        let constant = SlicePair::new(3, 3, vec![7.0; 9], vec![1; 9], Provenance::default()).unwrap();
        let all = expand_rm(&constant, &AugPolicy::default()).unwrap();
        assert!(all.iter().all(|v| v.image == constant.image && v.label == constant.label));
        assert!(Dihedral::ALL[1].apply(&pair(4, 3)).is_err());
        assert_eq!(all[5].provenance.augmentation, "rm:rot=90,mirror=1");
    }

    #[test]
    fn rm_policy_uses_center_crop() {
        let policy = AugPolicy { kind: PolicyKind::Rm, grid: WindowGrid { window: 4, stride: 2 }, ..AugPolicy::default() };
        let p = pair(8, 8);
        let out = expand(&p, &policy).unwrap();
        assert_eq!(out.len(), 8);
        assert_eq!(out[0].image, crop(&p, 2, 2, 4).unwrap().image);
    }
}
