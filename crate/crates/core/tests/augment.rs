mod common;

use std::collections::HashSet;

use aortaseg_core::augment::*;
use aortaseg_core::volio::{Provenance, SlicePair};
use proptest::prelude::*;
use rand::Rng;

fn pair(n: usize, image: Vec<f32>, label: Vec<u8>) -> SlicePair {
    SlicePair::new(n, n, image, label, Provenance { subject: "s".into(), slice: 2, augmentation: String::new() }).unwrap()
}

fn brute_windows(w: usize, h: usize, g: WindowGrid) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut y = 0;
    while y + g.window <= h {
        let mut x = 0;
        while x + g.window <= w {
            out.push((x, y));
            x += g.stride;
        }
        y += g.stride;
    }
    out
}

#[test]
fn window_enumeration_matches_brute_force_on_60_cases() {
    let mut rng = common::rng(11);
    for case in 0..60 {
        let g = WindowGrid { window: rng.random_range(1..40), stride: rng.random_range(1..20) };
        let (w, h) = (rng.random_range(g.window..g.window + 80), rng.random_range(g.window..g.window + 80));
        assert_eq!(enumerate_windows(w, h, g).unwrap(), brute_windows(w, h, g), "case {case}");
    }
}

#[test]
fn default_grid_on_a_full_slice() {
    let g = WindowGrid::default();
    assert_eq!(g.count(512).unwrap(), 1);
    assert_eq!(g.count(640).unwrap(), 3);
    assert_eq!(g.center_origin(640, 640).unwrap(), (64, 64));
    assert!(g.count(511).is_err());
}

#[test]
fn l_shape_follows_the_documented_dihedral_maps() {
    let n = 5;
    let mut label = vec![0u8; n * n];
    for (x, y) in [(0, 0), (0, 1), (0, 2), (1, 2)] {
        label[y * n + x] = 1;
    }
    let image: Vec<f32> = (0..n * n).map(|i| i as f32).collect();
    let p = pair(n, image, label);
    // mirror x ↦ n−1−x, then counter-clockwise turns (x, y) ↦ (y, n−1−x)
    let expected: [&[(usize, usize)]; 2] = [&[(0, 4), (1, 4), (2, 4), (2, 3)], &[(4, 0), (4, 1), (4, 2), (3, 2)]];
    let one = Dihedral { quarter_turns: 1, mirror: false }.apply(&p).unwrap();
    let mir = Dihedral { quarter_turns: 0, mirror: true }.apply(&p).unwrap();
    for (out, want) in [one, mir].iter().zip(expected) {
        let got: HashSet<_> = (0..n * n).filter(|&i| out.label[i] == 1).map(|i| (i % n, i / n)).collect();
        assert_eq!(got, want.iter().copied().collect::<HashSet<_>>());
    }
    let all: HashSet<Vec<u8>> = Dihedral::ALL.iter().map(|d| d.apply(&p).unwrap().label).collect();
    assert_eq!(all.len(), 8);
}

#[test]
fn expansion_sizes_and_descriptors() {
    let n = 96;
    let p = pair(n, vec![100.0; n * n], vec![0; n * n]);
    let gt = AugPolicy { grid: WindowGrid { window: 64, stride: 16 }, gray_variants: 3, ..Default::default() };
    let out = expand(&p, &gt).unwrap();
    assert_eq!(out.len(), 3 * 9);
    assert_eq!(out[0].provenance.augmentation, "gt:a=1,b=0,w=(16,16)");
    assert!(out.iter().all(|o| o.width == 64));
    let rm = AugPolicy { kind: PolicyKind::Rm, ..gt };
    let out = expand(&p, &rm).unwrap();
    assert_eq!(out.len(), 8);
    assert_eq!(out[5].provenance.augmentation, "rm:rot=90,mirror=1");
}

#[test]
fn gray_maps_depend_on_slice_not_call_order() {
    let policy = AugPolicy { seed: 5, ..Default::default() };
    let a = policy.gray_maps("A", 3);
    assert_eq!(a, policy.gray_maps("A", 3));
    assert_ne!(a, policy.gray_maps("A", 4));
    assert_ne!(a, policy.gray_maps("B", 3));
    assert_eq!(a[0], GrayMap::IDENTITY);
    assert!(a[1..].iter().all(|m| (0.8..=1.2).contains(&m.a) && (-100.0..=100.0).contains(&m.b)));
}

proptest! {
    #[test]
    fn dihedral_inverse_restores_the_slice(k in 0usize..8, n in 1usize..12, seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let p = pair(n, (0..n * n).map(|_| rng.random_range(-50.0..50.0)).collect(), (0..n * n).map(|_| rng.random_range(0..2)).collect());
        let d = Dihedral::ALL[k];
        let back = d.apply_inverse(&d.apply(&p).unwrap()).unwrap();
        prop_assert_eq!(back.image, p.image);
        prop_assert_eq!(back.label, p.label);
    }

    #[test]
    fn gray_maps_never_touch_labels(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let n = 40;
        let label: Vec<u8> = (0..n * n).map(|_| rng.random_range(0..2)).collect();
        let p = pair(n, vec![0.0; n * n], label.clone());
        let policy = AugPolicy { grid: WindowGrid { window: 40, stride: 8 }, gray_variants: 4, seed, ..Default::default() };
        for o in expand(&p, &policy).unwrap() {
            prop_assert_eq!(&o.label, &label);
        }
    }

    #[test]
    fn center_origin_is_on_the_grid(w in 8usize..200, h in 8usize..200, win in 1usize..8, stride in 1usize..10) {
        let g = WindowGrid { window: win, stride };
        let (x, y) = g.center_origin(w, h).unwrap();
        let all = enumerate_windows(w, h, g).unwrap();
        prop_assert!(all.contains(&(x, y)));
        let ideal = (w - win) as f64 / 2.0;
        prop_assert!(all.iter().all(|&(ox, _)| (ox as f64 - ideal).abs() >= (x as f64 - ideal).abs()));
    }
}
