//! Overlap and surface-distance evaluation.

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::ser::SerializeStruct;
use serde::{Serialize, Serializer};

use crate::error::{shape_err, validation_err, Error, Result};
use crate::postrecon::Mesh;
use crate::volio::{MaskVolume, UNIFIED_SPACING_MM};

pub type Point = [f64; 3];

/// Dice coefficient of two binary masks; 1.0 when both are empty.
pub fn dsc_slice(pred: &[u8], gt: &[u8]) -> Result<f64> {
    if pred.len() != gt.len() {
        return shape_err(format!("mask sizes differ: {} vs {}", pred.len(), gt.len()));
    }
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p != 0, g != 0);
        a += usize::from(p);
        b += usize::from(g);
        both += usize::from(p && g);
    }
    Ok(if a + b == 0 { 1.0 } else { 2.0 * both as f64 / (a + b) as f64 })
}

/// Per-slice Dice statistics. Slices empty in both masks score 1.0 but are
/// left out of the aggregate; the standard deviation is the population one.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DscReport {
    pub mean: f64,
    pub std: f64,
    pub per_slice: Vec<f64>,
    /// z index of every aggregated slice.
    pub slices: Vec<usize>,
    pub excluded_empty: usize,
    pub policy: &'static str,
}

pub const EMPTY_POLICY: &str = "both-empty slices excluded; population std";

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl DscReport {
    pub fn from_scores(per_slice: Vec<f64>, slices: Vec<usize>, excluded_empty: usize) -> Self {
        let (mean, std) = mean_std(&per_slice);
        Self { mean, std, per_slice, slices, excluded_empty, policy: EMPTY_POLICY }
    }

    /// Pools the slices of several reports into one aggregate.
    pub fn pooled(reports: &[&DscReport]) -> Self {
        let per_slice = reports.iter().flat_map(|r| r.per_slice.iter().copied()).collect();
        let slices = reports.iter().flat_map(|r| r.slices.iter().copied()).collect();
        Self::from_scores(per_slice, slices, reports.iter().map(|r| r.excluded_empty).sum())
    }
}

pub fn dsc_volume(pred: &MaskVolume, gt: &MaskVolume) -> Result<DscReport> {
    if pred.dims() != gt.dims() {
        return shape_err(format!("volume dims differ: {:?} vs {:?}", pred.dims(), gt.dims()));
    }
    let (mut scores, mut slices, mut excluded) = (Vec::new(), Vec::new(), 0);
    for z in 0..pred.dims()[2] {
        let (p, g) = (pred.slice(z), gt.slice(z));
        if p.iter().chain(g).all(|&v| v == 0) {
            excluded += 1;
            continue;
        }
        scores.push(dsc_slice(p, g)?);
        slices.push(z);
    }
    Ok(DscReport::from_scores(scores, slices, excluded))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Rotation by `angle` radians about `axis`, then translation.
    pub fn from_axis_angle(axis: [f64; 3], angle: f64, translation: [f64; 3]) -> Self {
        let r = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(Vector3::from(axis)), angle);
        Self { rotation: *r.matrix(), translation: Vector3::from(translation) }
    }

    pub fn apply(&self, p: Point) -> Point {
        (self.rotation * Vector3::from(p) + self.translation).into()
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self { rotation: self.rotation * other.rotation, translation: self.rotation * other.translation + self.translation }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    /// Orthonormality error `max(‖RᵀR − I‖∞, |det R − 1|)`.
    pub fn orthonormality_error(&self) -> f64 {
        let e = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        e.max((self.rotation.determinant() - 1.0).abs())
    }
}

impl Serialize for RigidTransform {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: [[f64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| self.rotation[(i, j)]));
        let mut st = s.serialize_struct("RigidTransform", 2)?;
        st.serialize_field("rotation", &rows)?;
        st.serialize_field("translation", &[self.translation.x, self.translation.y, self.translation.z])?;
        st.end()
    }
}

/// Closed-form rigid fit minimizing `Σ‖R·p + t − q‖²`.
pub fn kabsch(p: &[Point], q: &[Point]) -> RigidTransform {
    let n = p.len() as f64;
    let cp = p.iter().fold(Vector3::zeros(), |a, x| a + Vector3::from(*x)) / n;
    let cq = q.iter().fold(Vector3::zeros(), |a, x| a + Vector3::from(*x)) / n;
    let mut h = Matrix3::zeros();
    for (a, b) in p.iter().zip(q) {
        h += (Vector3::from(*a) - cp) * (Vector3::from(*b) - cq).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let d = (vt.transpose() * u.transpose()).determinant().signum();
    let rotation = vt.transpose() * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    RigidTransform { rotation, translation: cq - rotation * cp }
}

/// Rejects clouds whose spread is (nearly) confined to a line or a point.
pub fn check_spread(points: &[Point]) -> Result<()> {
    if points.len() < 3 {
        return Err(Error::Degenerate(format!("need at least 3 points, got {}", points.len())));
    }
    let n = points.len() as f64;
    let c = points.iter().fold(Vector3::zeros(), |a, x| a + Vector3::from(*x)) / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = Vector3::from(*p) - c;
        cov += d * d.transpose();
    }
    let mut ev: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    if !(ev[1] > 1e-12 * ev[2].max(f64::MIN_POSITIVE)) {
        return Err(Error::Degenerate("point cloud is collinear or coincident".into()));
    }
    Ok(())
}

/// Closest point to `p` on triangle `abc` (Voronoi-region walk).
pub fn closest_point_on_triangle(p: Point, a: Point, b: Point, c: Point) -> Point {
    let [p, a, b, c] = [p, a, b, c].map(Vector3::from);
    let (ab, ac, ap) = (b - a, c - a, p - a);
    let (d1, d2) = (ab.dot(&ap), ac.dot(&ap));
    if d1 <= 0.0 && d2 <= 0.0 {
        return a.into();
    }
    let bp = p - b;
    let (d3, d4) = (ab.dot(&bp), ac.dot(&bp));
    if d3 >= 0.0 && d4 <= d3 {
        return b.into();
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return (a + ab * (d1 / (d1 - d3))).into();
    }
    let cp = p - c;
    let (d5, d6) = (ab.dot(&cp), ac.dot(&cp));
    if d6 >= 0.0 && d5 <= d6 {
        return c.into();
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return (a + ac * (d2 / (d2 - d6))).into();
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && d4 - d3 >= 0.0 && d5 - d6 >= 0.0 {
        return (b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)))).into();
    }
    let denom = 1.0 / (va + vb + vc);
    (a + ab * (vb * denom) + ac * (vc * denom)).into()
}

fn dist2(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Uniform grid over triangle bounding boxes for nearest-surface queries.
pub struct TriangleGrid<'m> {
    mesh: &'m Mesh,
    origin: Point,
    cell: f64,
    dims: [usize; 3],
    cells: Vec<Vec<u32>>,
}

impl<'m> TriangleGrid<'m> {
    pub fn new(mesh: &'m Mesh) -> Result<Self> {
        if mesh.is_empty() {
            return validation_err("mesh has no triangles");
        }
        mesh.validate()?;
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for t in &mesh.triangles {
            for &k in t {
                let v = mesh.vertices[k as usize];
                for d in 0..3 {
                    lo[d] = lo[d].min(v[d]);
                    hi[d] = hi[d].max(v[d]);
                }
            }
        }
        let extent = (0..3).map(|d| hi[d] - lo[d]).fold(0.0, f64::max).max(1e-9);
        // roughly two triangles per occupied cell on a surface
        let cell = (extent / (mesh.triangles.len() as f64).sqrt().max(1.0)).max(extent / 256.0);
        let dims = [0, 1, 2].map(|d| (((hi[d] - lo[d]) / cell).floor() as usize + 1).min(1024));
        let mut grid = Self { mesh, origin: lo, cell, dims, cells: vec![Vec::new(); dims[0] * dims[1] * dims[2]] };
        for i in 0..mesh.triangles.len() {
            let tri = mesh.triangle(i);
            let lo_c = grid.cell_of([0, 1, 2].map(|d| tri.iter().map(|v| v[d]).fold(f64::INFINITY, f64::min)));
            let hi_c = grid.cell_of([0, 1, 2].map(|d| tri.iter().map(|v| v[d]).fold(f64::NEG_INFINITY, f64::max)));
            for z in lo_c[2]..=hi_c[2] {
                for y in lo_c[1]..=hi_c[1] {
                    for x in lo_c[0]..=hi_c[0] {
                        let id = grid.cell_index([x, y, z]);
                        grid.cells[id].push(i as u32);
                    }
                }
            }
        }
        Ok(grid)
    }

    fn cell_of(&self, p: Point) -> [usize; 3] {
        [0, 1, 2].map(|d| (((p[d] - self.origin[d]) / self.cell).floor().max(0.0) as usize).min(self.dims[d] - 1))
    }

    fn cell_index(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    /// Nearest surface point and its squared distance.
    ///
    /// Cells are visited in growing Chebyshev rings around the query's
    /// (clamped) cell; any triangle outside ring `r` is at least `r·cell` away.
    pub fn nearest(&self, p: Point) -> (Point, f64) {
        let c = self.cell_of(p).map(|v| v as i64);
        let dims = self.dims.map(|v| v as i64);
        let max_ring = dims.iter().copied().max().unwrap_or(1);
        let mut best = (p, f64::INFINITY);
        let mut seen = vec![false; self.mesh.triangles.len()];
        for r in 0..=max_ring {
            for z in (c[2] - r).max(0)..=(c[2] + r).min(dims[2] - 1) {
                for y in (c[1] - r).max(0)..=(c[1] + r).min(dims[1] - 1) {
                    let on_shell_yz = (z - c[2]).abs() == r || (y - c[1]).abs() == r;
                    let xs: Vec<i64> = if on_shell_yz {
                        ((c[0] - r).max(0)..=(c[0] + r).min(dims[0] - 1)).collect()
                    } else {
                        [c[0] - r, c[0] + r].into_iter().filter(|&x| x >= 0 && x < dims[0]).collect()
                    };
                    for x in xs {
                        for &t in &self.cells[self.cell_index([x as usize, y as usize, z as usize])] {
                            if std::mem::replace(&mut seen[t as usize], true) {
                                continue;
                            }
                            let [a, b, cc] = self.mesh.triangle(t as usize);
                            let q = closest_point_on_triangle(p, a, b, cc);
                            let d = dist2(p, q);
                            if d < best.1 {
                                best = (q, d);
                            }
                        }
                    }
                }
            }
            let bound = r as f64 * self.cell;
            if best.1.is_finite() && best.1 <= bound * bound {
                break;
            }
        }
        best
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct IcpOptions {
    pub max_iter: usize,
    /// Stop once the RMS residual changes by less than this.
    pub tol: f64,
}

impl Default for IcpOptions {
    fn default() -> Self {
        Self { max_iter: 50, tol: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IcpResult {
    /// Maps the input cloud onto the mesh.
    pub transform: RigidTransform,
    pub rms: f64,
    /// RMS residual after each iteration, starting with the initial pose.
    pub history: Vec<f64>,
}

fn rms_to(grid: &TriangleGrid<'_>, pts: &[Point]) -> (f64, Vec<Point>) {
    let mut sum = 0.0;
    let q = pts
        .iter()
        .map(|&p| {
            let (c, d) = grid.nearest(p);
            sum += d;
            c
        })
        .collect();
    ((sum / pts.len() as f64).sqrt(), q)
}

/// Point-to-point ICP returning the best pose seen.
pub fn icp_align(points: &[Point], mesh: &Mesh, opts: IcpOptions) -> Result<IcpResult> {
    check_spread(points)?;
    let grid = TriangleGrid::new(mesh)?;
    let mut current = RigidTransform::identity();
    let (mut rms, mut targets) = rms_to(&grid, points);
    let mut history = vec![rms];
    let mut best = (current, rms);
    for _ in 0..opts.max_iter {
        if rms == 0.0 {
            break;
        }
        current = kabsch(points, &targets);
        let moved: Vec<Point> = points.iter().map(|&p| current.apply(p)).collect();
        let (next, q) = rms_to(&grid, &moved);
        history.push(next);
        if next < best.1 {
            best = (current, next);
        }
        let done = (rms - next).abs() < opts.tol;
        rms = next;
        targets = q;
        if done {
            break;
        }
    }
    Ok(IcpResult { transform: best.0, rms: best.1, history })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Uniform-width histogram over `[0, max]`; the last bin is closed.
pub fn histogram(values: &[f64], bins: usize) -> Histogram {
    let bins = bins.max(1);
    let max = values.iter().copied().fold(0.0, f64::max);
    let width = max / bins as f64;
    let edges = (0..=bins).map(|i| i as f64 * width).collect();
    let mut counts = vec![0; bins];
    for &v in values {
        let k = if width > 0.0 { ((v / width) as usize).min(bins - 1) } else { 0 };
        counts[k] += 1;
    }
    Histogram { edges, counts }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct C2mReport {
    pub mean_mm: f64,
    pub max_mm: f64,
    pub mean_px: f64,
    pub max_px: f64,
    #[serde(skip)]
    pub distances_mm: Vec<f64>,
    /// Histogram of pixel-unit distances.
    pub hist: Histogram,
}

/// Unsigned distance of every transformed point to the mesh surface.
pub fn c2m_distances(points: &[Point], mesh: &Mesh, transform: &RigidTransform, bins: usize) -> Result<C2mReport> {
    if points.is_empty() {
        return validation_err("point cloud is empty");
    }
    let grid = TriangleGrid::new(mesh)?;
    let distances_mm: Vec<f64> = points.iter().map(|&p| grid.nearest(transform.apply(p)).1.sqrt()).collect();
    let px: Vec<f64> = distances_mm.iter().map(|d| d / UNIFIED_SPACING_MM).collect();
    let n = distances_mm.len() as f64;
    let mean_mm = distances_mm.iter().sum::<f64>() / n;
    let max_mm = distances_mm.iter().copied().fold(0.0, f64::max);
    Ok(C2mReport {
        mean_mm,
        max_mm,
        mean_px: mean_mm / UNIFIED_SPACING_MM,
        max_px: max_mm / UNIFIED_SPACING_MM,
        hist: histogram(&px, bins),
        distances_mm,
    })
}
