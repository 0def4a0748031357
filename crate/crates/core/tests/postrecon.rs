mod common;

use std::collections::VecDeque;

use aortaseg_core::postrecon::*;
use aortaseg_core::tensor::Tensor4;
use aortaseg_core::volio::MaskVolume;
use proptest::prelude::*;
use rand::Rng;

/// Breadth-first flood fill over the 26-neighbourhood; components in order of first voxel.
fn flood_components(v: &MaskVolume) -> Vec<Vec<usize>> {
    let [nx, ny, nz] = v.dims();
    let mut seen = vec![false; v.voxels().len()];
    let mut comps = Vec::new();
    for start in 0..seen.len() {
        if v.voxels()[start] == 0 || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (x, y, z) = ((i % nx) as isize, ((i / nx) % ny) as isize, (i / (nx * ny)) as isize);
            for dz in -1..=1 {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (qx, qy, qz) = (x + dx, y + dy, z + dz);
                        if qx < 0 || qy < 0 || qz < 0 || qx >= nx as isize || qy >= ny as isize || qz >= nz as isize {
                            continue;
                        }
                        let j = v.index(qx as usize, qy as usize, qz as usize);
                        if v.voxels()[j] != 0 && !seen[j] {
                            seen[j] = true;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        comps.push(comp);
    }
    comps
}

fn oracle_largest(v: &MaskVolume, min_size: usize) -> Vec<u8> {
    let comps = flood_components(v);
    let mut out = vec![0u8; v.voxels().len()];
    // first maximum in order of first voxel wins ties
    let best = comps.iter().filter(|c| c.len() >= min_size).fold(None::<&Vec<usize>>, |b, c| match b {
        Some(b) if b.len() >= c.len() => Some(b),
        _ => Some(c),
    });
    for &i in best.into_iter().flatten() {
        out[i] = 1;
    }
    out
}

fn random_mask(seed: u64, n: usize, density: f64) -> MaskVolume {
    let mut rng = common::rng(seed);
    let vox = (0..n * n * n).map(|_| u8::from(rng.random_bool(density))).collect();
    MaskVolume::new([n, n, n], [1.0; 3], vox).unwrap()
}

#[test]
fn largest_component_matches_flood_fill_on_50_volumes() {
    let mut rng = common::rng(21);
    for case in 0..50 {
        let density = rng.random_range(0.02..0.3);
        let min_size = rng.random_range(1..20);
        let v = random_mask(case, 32, density);
        let (kept, stats) = largest_component(&v, min_size).unwrap();
        assert_eq!(kept.voxels(), &oracle_largest(&v, min_size)[..], "case {case}");
        assert_eq!(stats.components, flood_components(&v).len());
        assert_eq!(stats.kept_voxels, kept.count());
    }
}

#[test]
fn small_components_are_dropped_before_choosing() {
    let mut v = MaskVolume::filled([10, 10, 10], [1.0; 3], 0).unwrap();
    let i = v.index(1, 1, 1);
    let mut vox = v.clone().into_voxels();
    vox[i] = 1;
    v = MaskVolume::new([10, 10, 10], [1.0; 3], vox).unwrap();
    let (kept, stats) = largest_component(&v, 2).unwrap();
    assert!(stats.empty);
    assert_eq!(kept.count(), 0);
    assert_eq!(stats.removed_small, 1);
}

#[test]
fn argmax_matches_elementwise_comparison() {
    let mut rng = common::rng(5);
    for _ in 0..50 {
        let (h, w, z) = (rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..5));
        let probs: Vec<Tensor4<f64>> = (0..z)
            .map(|_| {
                let fg: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
                let data = fg.iter().map(|p| 1.0 - p).chain(fg.iter().copied()).collect();
                Tensor4::from_vec((1, 2, h, w), data).unwrap()
            })
            .collect();
        let m = argmax_mask(&probs, [1.0; 3]).unwrap();
        for (k, p) in probs.iter().enumerate() {
            for i in 0..h * w {
                let (bg, fg) = (p.data()[i], p.data()[h * w + i]);
                assert_eq!(m.slice(k)[i], u8::from(fg > bg));
            }
        }
    }
}

fn sphere(n: usize, c: f64, r: f64) -> MaskVolume {
    let vox = (0..n * n * n)
        .map(|i| {
            let (x, y, z) = ((i % n) as f64 - c, ((i / n) % n) as f64 - c, (i / (n * n)) as f64 - c);
            u8::from(x * x + y * y + z * z <= r * r)
        })
        .collect();
    MaskVolume::new([n, n, n], [1.0; 3], vox).unwrap()
}

#[test]
fn sphere_surface_is_closed_genus_zero() {
    let v = sphere(32, 15.5, 10.0);
    let mesh = marching_cubes(&v);
    assert!(mesh.is_closed());
    assert_eq!(mesh.euler_characteristic(), 2);
    let vol = mesh.signed_volume();
    assert!((vol - v.count() as f64).abs() / (v.count() as f64) < 0.15, "{vol} vs {}", v.count());
}

#[test]
fn anisotropic_spacing_scales_the_mesh() {
    let v = sphere(16, 7.5, 5.0);
    let w = MaskVolume::new(v.dims(), [0.5, 0.5, 2.0], v.voxels().to_vec()).unwrap();
    let (a, b) = (marching_cubes(&v), marching_cubes(&w));
    assert!((b.signed_volume() - 0.5 * a.signed_volume()).abs() < 1e-9 * a.signed_volume());
}

#[test]
fn meshes_survive_obj_text() {
    let mesh = marching_cubes(&sphere(12, 5.5, 4.0));
    let back = Mesh::from_obj(&mesh.to_obj()).unwrap();
    assert_eq!(back.triangles, mesh.triangles);
    assert!(back.vertices.iter().zip(&mesh.vertices).all(|(a, b)| (0..3).all(|k| (a[k] - b[k]).abs() < 1e-9)));
    let stl = mesh.to_stl("s");
    assert_eq!(stl.matches("facet normal").count(), mesh.triangles.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn any_mask_gives_a_closed_outward_mesh(seed in any::<u64>(), density in 0.05f64..0.6) {
        let v = random_mask(seed, 6, density);
        let mesh = marching_cubes(&v);
        let e = mesh.edge_stats();
        prop_assert_eq!(e.boundary, 0);
        prop_assert!(mesh.signed_volume() >= 0.0);
    }

    #[test]
    fn largest_component_is_idempotent(seed in any::<u64>(), density in 0.05f64..0.4) {
        let v = random_mask(seed, 10, density);
        let (once, _) = largest_component(&v, 1).unwrap();
        let (twice, stats) = largest_component(&once, 1).unwrap();
        prop_assert_eq!(&once, &twice);
        prop_assert!(stats.components <= 1);
        prop_assert!(once.voxels().iter().zip(v.voxels()).all(|(a, b)| a <= b));
    }
}
