//! From probabilities to a clean mask and a triangle surface.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::mc_tables::TRI_TABLE;
use crate::scalar::Scalar;
use crate::tensor::Tensor4;
use crate::volio::{MaskVolume, Volume};

pub const DEFAULT_MIN_SIZE: usize = 64;

/// Stacks per-slice `(1, 2, h, w)` probabilities into a mask: foreground iff
/// channel 1 exceeds 0.5 (exact ties go to background).
pub fn argmax_mask<T: Scalar>(probs: &[Tensor4<T>], spacing: [f64; 3]) -> Result<MaskVolume> {
    let Some(first) = probs.first() else {
        return Volume::new([0, 0, 0], spacing, Vec::new());
    };
    let (h, w) = (first.dims().h, first.dims().w);
    let half = T::from_f64_lossy(0.5);
    let mut voxels = Vec::with_capacity(h * w * probs.len());
    for (z, p) in probs.iter().enumerate() {
        let d = p.dims();
        if d.c != 2 || d.n != 1 || d.h != h || d.w != w {
            return shape_err(format!("slice {z}: probabilities {d} are not (1, 2, {h}, {w})"));
        }
        voxels.extend(p.data()[h * w..].iter().map(|&v| u8::from(v > half)));
    }
    Volume::new([w, h, probs.len()], spacing, voxels)
}

/// Offsets of the 13 neighbours that precede a voxel in scan order (26-connectivity).
fn backward_neighbours() -> Vec<(isize, isize, isize)> {
    let mut out = Vec::with_capacity(13);
    for dz in -1..=0isize {
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                if (dz, dy, dx) < (0, 0, 0) {
                    out.push((dx, dy, dz));
                }
            }
        }
    }
    out
}

struct DisjointSet {
    parent: Vec<u32>,
}

impl DisjointSet {
    fn find(&mut self, mut a: u32) -> u32 {
        while self.parent[a as usize] != a {
            let p = self.parent[a as usize];
            self.parent[a as usize] = self.parent[p as usize];
            a = p;
        }
        a
    }

    /// Keeps the smaller root so each set is named by its first voxel.
    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.parent[hi as usize] = lo;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentStats {
    pub components: usize,
    pub removed_small: usize,
    pub kept_voxels: usize,
    /// No foreground survived.
    pub empty: bool,
}

/// Sizes of all 26-connected components, keyed by the scan index of their first voxel.
pub fn label_components(v: &MaskVolume) -> (Vec<u32>, Vec<(usize, usize)>) {
    let [nx, ny, nz] = v.dims();
    let vox = v.voxels();
    const NONE: u32 = u32::MAX;
    let mut ds = DisjointSet { parent: Vec::new() };
    let mut label = vec![NONE; vox.len()];
    let offsets = backward_neighbours();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = v.index(x, y, z);
                if vox[i] == 0 {
                    continue;
                }
                let mut mine = NONE;
                for &(dx, dy, dz) in &offsets {
                    let (qx, qy, qz) = (x as isize + dx, y as isize + dy, z as isize + dz);
                    if qx < 0 || qy < 0 || qz < 0 || qx >= nx as isize || qy >= ny as isize {
                        continue;
                    }
                    let l = label[v.index(qx as usize, qy as usize, qz as usize)];
                    if l == NONE {
                        continue;
                    }
                    if mine == NONE {
                        mine = l;
                    } else {
                        ds.union(mine, l);
                    }
                }
                if mine == NONE {
                    mine = ds.parent.len() as u32;
                    ds.parent.push(mine);
                }
                label[i] = mine;
            }
        }
    }
    // provisional labels are created in scan order, so the smallest root of a
    // set is also its first voxel's label
    let mut first_voxel = vec![usize::MAX; ds.parent.len()];
    let mut size = vec![0usize; ds.parent.len()];
    for (i, l) in label.iter_mut().enumerate() {
        if *l != NONE {
            *l = ds.find(*l);
            let r = *l as usize;
            first_voxel[r] = first_voxel[r].min(i);
            size[r] += 1;
        }
    }
    let comps = (0..size.len()).filter(|&r| size[r] > 0).map(|r| (first_voxel[r], size[r])).collect();
    (label, comps)
}

/// Drops components below `min_size` voxels, then keeps the largest survivor
/// (ties: earliest first voxel in scan order).
pub fn largest_component(v: &MaskVolume, min_size: usize) -> Result<(MaskVolume, ComponentStats)> {
    let (label, comps) = label_components(v);
    let survivors: Vec<_> = comps.iter().filter(|c| c.1 >= min_size).collect();
    let best = survivors.iter().copied().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)));
    let stats = ComponentStats {
        components: comps.len(),
        removed_small: comps.len() - survivors.len(),
        kept_voxels: best.map_or(0, |b| b.1),
        empty: best.is_none(),
    };
    let voxels = match best {
        Some(&(first, _)) => {
            let keep = label[first];
            label.iter().map(|&l| u8::from(l == keep)).collect()
        }
        None => vec![0; label.len()],
    };
    Ok((Volume::new(v.dims(), v.spacing(), voxels)?, stats))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    /// Positions in mm.
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct EdgeStats {
    pub edges: usize,
    pub boundary: usize,
    pub non_manifold: usize,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len() as u32;
        for (i, t) in self.triangles.iter().enumerate() {
            if t.iter().any(|&k| k >= n) {
                return Err(Error::Validation(format!("triangle {i} references a missing vertex")));
            }
            if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                return Err(Error::Validation(format!("triangle {i} is degenerate")));
            }
        }
        Ok(())
    }

    pub fn triangle(&self, i: usize) -> [[f64; 3]; 3] {
        self.triangles[i].map(|k| self.vertices[k as usize])
    }

    /// Enclosed volume by the divergence theorem; positive for outward orientation.
    pub fn signed_volume(&self) -> f64 {
        (0..self.triangles.len())
            .map(|i| {
                let [a, b, c] = self.triangle(i);
                dot(a, cross(b, c))
            })
            .sum::<f64>()
            / 6.0
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len())
            .map(|i| {
                let [a, b, c] = self.triangle(i);
                let n = cross(sub(b, a), sub(c, a));
                0.5 * dot(n, n).sqrt()
            })
            .sum()
    }

    pub fn edge_stats(&self) -> EdgeStats {
        let mut count: HashMap<(u32, u32), usize> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        EdgeStats {
            edges: count.len(),
            boundary: count.values().filter(|&&c| c == 1).count(),
            non_manifold: count.values().filter(|&&c| c > 2).count(),
        }
    }

    /// V − E + F over referenced vertices.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.vertices.len()];
        for t in &self.triangles {
            for &k in t {
                used[k as usize] = true;
            }
        }
        let v = used.iter().filter(|&&u| u).count() as i64;
        v - self.edge_stats().edges as i64 + self.triangles.len() as i64
    }

    /// Every edge shared by exactly two triangles.
    pub fn is_closed(&self) -> bool {
        let s = self.edge_stats();
        s.boundary == 0 && s.non_manifold == 0 && !self.is_empty()
    }

    pub fn flip(&mut self) {
        for t in &mut self.triangles {
            t.swap(1, 2);
        }
    }

    pub fn to_stl(&self, name: &str) -> String {
        let mut s = format!("solid {name}\n");
        for i in 0..self.triangles.len() {
            let [a, b, c] = self.triangle(i);
            let n = cross(sub(b, a), sub(c, a));
            let len = dot(n, n).sqrt();
            let n = if len > 0.0 { n.map(|v| v / len) } else { [0.0; 3] };
            let _ = writeln!(s, "  facet normal {:e} {:e} {:e}", n[0], n[1], n[2]);
            s.push_str("    outer loop\n");
            for p in [a, b, c] {
                let _ = writeln!(s, "      vertex {:e} {:e} {:e}", p[0], p[1], p[2]);
            }
            s.push_str("    endloop\n  endfacet\n");
        }
        let _ = writeln!(s, "endsolid {name}");
        s
    }

    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            let _ = writeln!(s, "v {:?} {:?} {:?}", v[0], v[1], v[2]);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        s
    }

    /// Parses `v` and triangular `f` records; faces may use `v/vt/vn` syntax.
    pub fn from_obj(text: &str) -> Result<Self> {
        let mut mesh = Self::default();
        for (ln, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let bad = |what: &str| Error::Format(format!("obj line {}: {what}", ln + 1));
            match parts.next() {
                Some("v") => {
                    let xyz: Vec<f64> = parts.take(3).map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| bad("bad vertex"))?;
                    if xyz.len() != 3 {
                        return Err(bad("vertex needs three coordinates"));
                    }
                    mesh.vertices.push([xyz[0], xyz[1], xyz[2]]);
                }
                Some("f") => {
                    let idx = parts
                        .map(|p| p.split('/').next().unwrap_or("").parse::<i64>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| bad("bad face index"))?;
                    if idx.len() != 3 {
                        return Err(bad("only triangular faces are supported"));
                    }
                    let n = mesh.vertices.len() as i64;
                    let fix = |k: i64| if k < 0 { n + k } else { k - 1 };
                    let tri = [fix(idx[0]), fix(idx[1]), fix(idx[2])];
                    if tri.iter().any(|&k| k < 0 || k >= n) {
                        return Err(bad("face index out of range"));
                    }
                    mesh.triangles.push(tri.map(|k| k as u32));
                }
                _ => {}
            }
        }
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn write_stl(&self, path: impl AsRef<Path>, name: &str) -> Result<()> {
        Ok(fs::write(path, self.to_stl(name))?)
    }

    pub fn write_obj(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(fs::write(path, self.to_obj())?)
    }

    pub fn read_obj(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_obj(&fs::read_to_string(path)?)
    }
}

/// Cube corner offsets and edge endpoints in the table's numbering.
const CORNERS: [[i64; 3]; 8] = [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]];
const EDGES: [[usize; 2]; 12] =
    [[0, 1], [1, 2], [2, 3], [3, 0], [4, 5], [5, 6], [6, 7], [7, 4], [0, 4], [1, 5], [2, 6], [3, 7]];

/// Iso-surface at 0.5 of a binary mask surrounded by a zero border. Vertices
/// sit at edge midpoints and are scaled by the voxel spacing; triangles are
/// oriented outward.
pub fn marching_cubes(v: &MaskVolume) -> Mesh {
    let [nx, ny, nz] = v.dims().map(|d| d as i64);
    let sp = v.spacing();
    let inside = |x: i64, y: i64, z: i64| {
        x >= 0 && y >= 0 && z >= 0 && x < nx && y < ny && z < nz && v.get(x as usize, y as usize, z as usize) != 0
    };
    let mut mesh = Mesh::default();
    let mut ids: HashMap<[i64; 3], u32> = HashMap::new();
    for z in -1..nz {
        for y in -1..ny {
            for x in -1..nx {
                let mut case = 0usize;
                for (bit, c) in CORNERS.iter().enumerate() {
                    // the table marks corners below the iso-level
                    if !inside(x + c[0], y + c[1], z + c[2]) {
                        case |= 1 << bit;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                let row = &TRI_TABLE[case];
                for tri in row.chunks(3).take_while(|t| t[0] >= 0) {
                    let idx = [tri[0], tri[1], tri[2]].map(|e| {
                        let [a, b] = EDGES[e as usize];
                        // doubled lattice coordinates of the edge midpoint
                        let key = [0, 1, 2].map(|k| 2 * [x, y, z][k] + CORNERS[a][k] + CORNERS[b][k]);
                        *ids.entry(key).or_insert_with(|| {
                            mesh.vertices.push([0, 1, 2].map(|k| key[k] as f64 / 2.0 * sp[k]));
                            (mesh.vertices.len() - 1) as u32
                        })
                    });
                    mesh.triangles.push(idx);
                }
            }
        }
    }
    if mesh.signed_volume() < 0.0 {
        mesh.flip();
    }
    mesh
}
