mod common;

use aortaseg_core::evalkit::*;
use aortaseg_core::postrecon::{marching_cubes, Mesh};
use aortaseg_core::volio::MaskVolume;
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn count_dsc(p: &[u8], g: &[u8]) -> f64 {
    let inter = p.iter().zip(g).filter(|(a, b)| **a == 1 && **b == 1).count();
    let total = p.iter().filter(|&&a| a == 1).count() + g.iter().filter(|&&b| b == 1).count();
    if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 }
}

#[test]
fn dsc_matches_pixel_counting_on_100_pairs() {
    let mut rng = common::rng(31);
    for case in 0..100 {
        let n = rng.random_range(1..200);
        let (dp, dg) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let p: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(dp))).collect();
        let g: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(dg))).collect();
        let d = dsc_slice(&p, &g).unwrap();
        assert!((d - count_dsc(&p, &g)).abs() <= 1e-12, "case {case}");
    }
}

#[test]
fn volume_dsc_skips_slices_empty_in_both() {
    let p = MaskVolume::new([2, 1, 3], [1.0; 3], vec![1, 0, 0, 0, 1, 1]).unwrap();
    let g = MaskVolume::new([2, 1, 3], [1.0; 3], vec![1, 1, 0, 0, 0, 1]).unwrap();
    let r = dsc_volume(&p, &g).unwrap();
    assert_eq!(r.slices, vec![0, 2]);
    assert_eq!(r.excluded_empty, 1);
    let want = [2.0 / 3.0, 2.0 / 3.0];
    assert!((r.mean - 2.0 / 3.0).abs() < 1e-12 && r.std.abs() < 1e-12);
    assert_eq!(r.per_slice, want);
}

fn random_point(rng: &mut ChaCha8Rng, s: f64) -> Point {
    [rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s)]
}

fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform {
    let axis = random_point(rng, 1.0);
    RigidTransform::from_axis_angle(axis, rng.random_range(-3.0..3.0), random_point(rng, 10.0))
}

fn dist2(a: Point, b: Point) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

#[test]
fn closest_point_beats_dense_barycentric_sampling() {
    let mut rng = common::rng(41);
    let steps = 120;
    for _ in 0..50 {
        let (a, b, c) = (random_point(&mut rng, 3.0), random_point(&mut rng, 3.0), random_point(&mut rng, 3.0));
        let p = random_point(&mut rng, 6.0);
        let q = closest_point_on_triangle(p, a, b, c);
        let mut best = f64::INFINITY;
        for i in 0..=steps {
            for j in 0..=steps - i {
                let (u, v) = (i as f64 / steps as f64, j as f64 / steps as f64);
                let s: Point = std::array::from_fn(|k| a[k] + u * (b[k] - a[k]) + v * (c[k] - a[k]));
                best = best.min(dist2(p, s));
            }
        }
        let d = dist2(p, q).sqrt();
        assert!(d <= best.sqrt() + 1e-12);
        // sampling is within one lattice cell of the true minimum
        let edge = [dist2(a, b), dist2(b, c), dist2(a, c)].into_iter().fold(0.0, f64::max).sqrt();
        assert!(best.sqrt() - d <= edge / steps as f64 + 1e-9);
    }
}

#[test]
fn kabsch_recovers_rotations_and_stays_orthonormal() {
    let mut rng = common::rng(51);
    for _ in 0..50 {
        let t = random_transform(&mut rng);
        let p: Vec<Point> = (0..20).map(|_| random_point(&mut rng, 5.0)).collect();
        let q: Vec<Point> = p.iter().map(|&x| t.apply(x)).collect();
        let est = kabsch(&p, &q);
        assert!(est.orthonormality_error() < 1e-10);
        assert!(est.rotation.determinant() > 0.0);
        for (a, b) in p.iter().zip(&q) {
            assert!(dist2(est.apply(*a), *b) < 1e-16);
        }
    }
}

fn sphere_mesh() -> Mesh {
    let n = 24;
    let vox = (0..n * n * n)
        .map(|i| {
            let (x, y, z) = ((i % n) as f64 - 11.5, ((i / n) % n) as f64 - 11.5, (i / (n * n)) as f64 - 11.5);
            u8::from(x * x + y * y + z * z <= 64.0)
        })
        .collect();
    marching_cubes(&MaskVolume::new([n, n, n], [1.0; 3], vox).unwrap())
}

#[test]
fn grid_nearest_agrees_with_exhaustive_search() {
    let mesh = sphere_mesh();
    let grid = TriangleGrid::new(&mesh).unwrap();
    let mut rng = common::rng(61);
    for _ in 0..60 {
        let p = std::array::from_fn(|_| rng.random_range(-4.0..28.0));
        let brute = (0..mesh.triangles.len())
            .map(|i| {
                let [a, b, c] = mesh.triangle(i);
                dist2(p, closest_point_on_triangle(p, a, b, c))
            })
            .fold(f64::INFINITY, f64::min);
        let (_, d) = grid.nearest(p);
        assert!((d - brute).abs() <= 1e-9 * brute.max(1.0));
    }
}

#[test]
fn icp_history_never_worsens_the_best_pose() {
    let mesh = sphere_mesh();
    let t = RigidTransform::from_axis_angle([1.0, 2.0, 0.5], 0.1, [1.0, -0.5, 0.8]);
    let cloud: Vec<Point> = mesh.vertices.iter().step_by(3).map(|&v| t.apply(v)).collect();
    let r = icp_align(&cloud, &mesh, IcpOptions { max_iter: 100, tol: 1e-9 }).unwrap();
    assert!(r.history.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{:?}", r.history);
    assert_eq!(r.rms, r.history.iter().copied().fold(f64::INFINITY, f64::min));
    assert!(r.rms < r.history[0]);
}

#[test]
fn collinear_clouds_are_rejected() {
    let line: Vec<Point> = (0..10).map(|i| [i as f64, 0.0, 0.0]).collect();
    assert!(check_spread(&line).is_err());
    assert!(icp_align(&line, &sphere_mesh(), IcpOptions::default()).is_err());
}

#[test]
fn c2m_is_invariant_under_moving_both_cloud_and_mesh() {
    let mesh = sphere_mesh();
    let mut rng = common::rng(71);
    let cloud: Vec<Point> = (0..40).map(|_| std::array::from_fn(|_| rng.random_range(0.0..24.0))).collect();
    let base = c2m_distances(&cloud, &mesh, &RigidTransform::identity(), 10).unwrap();
    for _ in 0..5 {
        let t = random_transform(&mut rng);
        let moved = Mesh { vertices: mesh.vertices.iter().map(|&v| t.apply(v)).collect(), triangles: mesh.triangles.clone() };
        let r = c2m_distances(&cloud, &moved, &t, 10).unwrap();
        for (a, b) in base.distances_mm.iter().zip(&r.distances_mm) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!((r.mean_px - r.mean_mm / 0.645).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn compose_with_inverse_is_identity(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let t = random_transform(&mut rng);
        let id = t.compose(&t.inverse());
        let p = random_point(&mut rng, 10.0);
        prop_assert!(dist2(id.apply(p), p) < 1e-14);
        prop_assert!(t.orthonormality_error() < 1e-12);
    }

    #[test]
    fn dsc_is_symmetric_and_bounded(p in prop::collection::vec(0u8..2, 1..64), seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let g: Vec<u8> = p.iter().map(|_| rng.random_range(0..2)).collect();
        let (a, b) = (dsc_slice(&p, &g).unwrap(), dsc_slice(&g, &p).unwrap());
        prop_assert_eq!(a, b);
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert_eq!(dsc_slice(&p, &p).unwrap(), 1.0);
    }

    #[test]
    fn closest_point_is_no_farther_than_any_vertex(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let (a, b, c, p) = (random_point(&mut rng, 3.0), random_point(&mut rng, 3.0), random_point(&mut rng, 3.0), random_point(&mut rng, 6.0));
        let d = dist2(p, closest_point_on_triangle(p, a, b, c));
        prop_assert!(d <= dist2(p, a) + 1e-12 && d <= dist2(p, b) + 1e-12 && d <= dist2(p, c) + 1e-12);
    }
}
