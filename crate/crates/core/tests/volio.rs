mod common;

use aortaseg_core::volio::*;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn phantom_mask_matches_lattice_count_per_slice() {
    let spec = PhantomSpec::desk(4);
    let (image, mask) = make_phantom(&spec).unwrap();
    assert_eq!(image.dims(), [64, 64, 32]);
    let c = spec.center();
    for z in 0..spec.n_slices {
        let r = spec.radius.radius(z, spec.n_slices);
        // count lattice points row by row: |x - cx| <= sqrt(r² - dy²)
        let mut expect = 0usize;
        for y in 0..spec.height {
            let dy = y as f64 - c[1];
            let h2 = r * r - dy * dy;
            if h2 < 0.0 {
                continue;
            }
            let h = h2.sqrt();
            expect += (0..spec.width).filter(|&x| (x as f64 - c[0]).abs() <= h + 1e-9).count();
        }
        let got = mask.slice(z).iter().filter(|&&v| v == 1).count();
        assert_eq!(got, expect, "slice {z}");
    }
}

#[test]
fn phantom_is_seed_deterministic() {
    let a = make_phantom(&PhantomSpec::desk(9)).unwrap();
    let b = make_phantom(&PhantomSpec::desk(9)).unwrap();
    let c = make_phantom(&PhantomSpec::desk(10)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.0, c.0);
    assert_eq!(a.1, c.1);
}

#[test]
fn bundle_survives_disk() {
    let dir = tempfile::tempdir().unwrap();
    let (image, mask) = make_phantom(&PhantomSpec::desk(1)).unwrap();
    write_bundle(&image, dir.path().join("img")).unwrap();
    write_bundle(&mask, dir.path().join("msk")).unwrap();
    assert_eq!(bundle_dtype(dir.path().join("img")).unwrap(), "i16");
    assert_eq!(read_bundle::<i16>(dir.path().join("img")).unwrap(), image);
    assert_eq!(read_bundle::<u8>(dir.path().join("msk")).unwrap(), mask);
    assert!(read_bundle::<u8>(dir.path().join("img")).is_err());
}

#[test]
fn resampling_keeps_linear_ramps_exact() {
    let mut rng = common::rng(3);
    for _ in 0..20 {
        let (nx, ny) = (rng.random_range(4..20), rng.random_range(4..20));
        let (gx, gy) = (rng.random_range(-3..4) as f64, rng.random_range(-3..4) as f64);
        let voxels = (0..ny).flat_map(|y| (0..nx).map(move |x| (gx * x as f64 + gy * y as f64) as i16)).collect();
        let s = rng.random_range(0.5..1.0);
        let v = ImageVolume::new([nx, ny, 1], [s, s, 1.0], voxels).unwrap();
        let out = resample_xy(&v, [UNIFIED_SPACING_MM; 2]).unwrap();
        let [mx, my, _] = out.dims();
        assert_eq!(mx, resampled_len(nx, s, UNIFIED_SPACING_MM));
        for y in 0..my {
            for x in 0..mx {
                let (u, w) = (x as f64 * UNIFIED_SPACING_MM / s, y as f64 * UNIFIED_SPACING_MM / s);
                let want = gx * u + gy * w;
                assert!((f64::from(out.get(x, y, 0)) - want).abs() <= 0.5 + 1e-9);
            }
        }
    }
}

proptest! {
    #[test]
    fn resampled_grid_stays_inside_the_source(n in 1usize..400, s in 0.3f64..2.0, t in 0.3f64..2.0) {
        let m = resampled_len(n, s, t);
        prop_assert!(m >= 1);
        prop_assert!(((m - 1) as f64) * t <= (n - 1) as f64 * s + 1e-6);
        prop_assert!((m as f64) * t > (n - 1) as f64 * s - 1e-6);
    }

    #[test]
    fn normalization_is_monotone_and_bounded(mut v in prop::collection::vec(-2000f32..2000.0, 1..64)) {
        v.sort_by(f32::total_cmp);
        let out = normalize_intensity(&v, IntensityWindow::default()).unwrap();
        prop_assert!(out.iter().all(|x| (0.0..=1.0).contains(x)));
        prop_assert!(out.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn mask_resampling_stays_binary(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let voxels = (0..12 * 9).map(|_| rng.random_range(0..2u8)).collect();
        let v = MaskVolume::new([12, 9, 1], [0.8, 0.7, 1.0], voxels).unwrap();
        let out = resample_xy(&v, [UNIFIED_SPACING_MM; 2]).unwrap();
        prop_assert!(out.voxels().iter().all(|&x| x <= 1));
    }
}
