mod common;

use aortaseg_core::gradcheck;
use aortaseg_core::tensor::{
    conv2d_forward, cross_entropy_loss, deconv2_forward, maxpool2_backward, maxpool2_forward, softmax_channels,
    ConvParams, Dims4, Tensor4,
};
use common::{random_tensor, rel_close, rng};
use proptest::prelude::*;
use rand::Rng;

/// Direct six-nested-loop convolution with zero padding.
fn naive_conv(x: &Tensor4<f64>, w: &Tensor4<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor4<f64> {
    let (xd, wd) = (x.dims(), w.dims());
    let oh = (xd.h + 2 * pad - wd.h) / stride + 1;
    let ow = (xd.w + 2 * pad - wd.w) / stride + 1;
    let mut out = Tensor4::zeros((xd.n, wd.n, oh, ow));
    for n in 0..xd.n {
        for o in 0..wd.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[o];
                    for c in 0..wd.c {
                        for ky in 0..wd.h {
                            for kx in 0..wd.w {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < xd.h && (ix as usize) < xd.w {
                                    acc += w.at(o, c, ky, kx) * x.at(n, c, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    out.set(n, o, oy, ox, acc);
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_nested_loop_oracle_on_50_cases() {
    let mut r = rng(11);
    for case in 0..50 {
        let k = if r.random_bool(0.5) { 3 } else { 1 };
        let pad = if k == 3 { r.random_range(0..=1) } else { 0 };
        let stride = r.random_range(1..=2);
        let (n, c, o) = (r.random_range(1..=2), r.random_range(1..=4), r.random_range(1..=4));
        let (mut h, mut w) = (r.random_range(3..=7), r.random_range(3..=7));
        // integral output dims
        while (h + 2 * pad - k) % stride != 0 {
            h += 1;
        }
        while (w + 2 * pad - k) % stride != 0 {
            w += 1;
        }
        let x = random_tensor(&mut r, (n, c, h, w));
        let wt = random_tensor(&mut r, (o, c, k, k));
        let b: Vec<f64> = (0..o).map(|_| r.random_range(-1.0..1.0)).collect();
        let expected = naive_conv(&x, &wt, &b, stride, pad);
        let got = conv2d_forward(&x, &ConvParams::new(wt.clone(), b.clone(), stride, pad).unwrap()).unwrap();
        assert_eq!(got.dims(), expected.dims(), "case {case}");
        for (g, e) in got.data().iter().zip(expected.data()) {
            assert!(rel_close(*g, *e, 1e-5), "case {case}: {g} vs {e}");
        }
        // f32 instantiation against the f64 oracle
        let got32 = conv2d_forward(
            &x.cast::<f32>(),
            &ConvParams::new(wt.cast::<f32>(), b.iter().map(|&v| v as f32).collect(), stride, pad).unwrap(),
        )
        .unwrap();
        for (g, e) in got32.data().iter().zip(expected.data()) {
            assert!(rel_close(*g as f64, *e, 1e-5), "f32 case {case}: {g} vs {e}");
        }
    }
}

#[test]
fn conv_spec_case_2x3x5x5() {
    let mut r = rng(5);
    let x = random_tensor(&mut r, (2, 3, 5, 5));
    let w = random_tensor(&mut r, (4, 3, 3, 3));
    let b = vec![0.1, -0.2, 0.3, 0.0];
    let got = conv2d_forward(&x, &ConvParams::new(w.clone(), b.clone(), 1, 1).unwrap()).unwrap();
    let expected = naive_conv(&x, &w, &b, 1, 1);
    assert_eq!(got.dims(), Dims4::new(2, 4, 5, 5));
    for (g, e) in got.data().iter().zip(expected.data()) {
        assert!(rel_close(*g, *e, 1e-5));
    }
}

#[test]
fn layer_gradients_match_finite_differences() {
    for seed in 0..5 {
        for report in [
            gradcheck::check_conv2d(seed).unwrap(),
            gradcheck::check_maxpool2(seed).unwrap(),
            gradcheck::check_deconv2(seed).unwrap(),
            gradcheck::check_relu(seed).unwrap(),
            gradcheck::check_softmax_cross_entropy(seed).unwrap(),
            gradcheck::check_concat(seed).unwrap(),
        ] {
            assert!(report.passed, "seed {seed}: {report:?}");
            assert!(report.checked > 0);
        }
    }
}

#[test]
fn whole_network_gradient_spot_check() {
    let report = gradcheck::check_unet(3, 20).unwrap();
    assert!(report.passed, "{report:?}");
    assert_eq!(report.checked, 20);
}

/// Stride-2, 2×2 convolution without bias, written out directly.
fn conv_stride2(y: &Tensor4<f64>, w: &Tensor4<f64>) -> Tensor4<f64> {
    let (yd, wd) = (y.dims(), w.dims());
    Tensor4::from_fn((yd.n, wd.c, yd.h / 2, yd.w / 2), |n, c, i, j| {
        let mut acc = 0.0;
        for o in 0..wd.n {
            for dy in 0..2 {
                for dx in 0..2 {
                    acc += w.at(o, c, dy, dx) * y.at(n, o, 2 * i + dy, 2 * j + dx);
                }
            }
        }
        acc
    })
}

#[test]
fn deconv_is_adjoint_of_stride2_conv() {
    let mut r = rng(21);
    for _ in 0..20 {
        let (n, ic, oc) = (r.random_range(1..=2), r.random_range(1..=4), r.random_range(1..=4));
        let (h, w) = (r.random_range(1..=5), r.random_range(1..=5));
        let x = random_tensor(&mut r, (n, ic, h, w));
        let wt = random_tensor(&mut r, (oc, ic, 2, 2));
        let y = random_tensor(&mut r, (n, oc, 2 * h, 2 * w));
        let p = ConvParams::new(wt.clone(), vec![0.0; oc], 2, 0).unwrap();
        let lhs = deconv2_forward(&x, &p).unwrap().dot(&y).unwrap();
        let rhs = x.dot(&conv_stride2(&y, &wt)).unwrap();
        assert!((lhs - rhs).abs() <= 1e-4 * lhs.abs().max(rhs.abs()).max(1e-12), "{lhs} vs {rhs}");
    }
}

#[test]
fn maxpool_matches_window_max_oracle() {
    let mut r = rng(31);
    for _ in 0..10 {
        let x = random_tensor(&mut r, (1, 2, 8, 8));
        let (y, map) = maxpool2_forward(&x).unwrap();
        for c in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    let vals = [x.at(0, c, 2 * i, 2 * j), x.at(0, c, 2 * i, 2 * j + 1), x.at(0, c, 2 * i + 1, 2 * j), x.at(0, c, 2 * i + 1, 2 * j + 1)];
                    let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    assert_eq!(y.at(0, c, i, j), m);
                    let (py, px) = map.position(0, c, i, j);
                    assert_eq!(x.at(0, c, py, px), m);
                }
            }
        }
    }
}

/// Direct triple sum over width, height and classes.
fn direct_loss(p: &Tensor4<f64>, g: &Tensor4<f64>) -> f64 {
    let d = p.dims();
    let mut total = 0.0;
    for i in 0..d.w {
        for j in 0..d.h {
            for k in 0..d.c {
                total -= g.at(0, k, j, i) * p.at(0, k, j, i).max(1e-12).ln();
            }
        }
    }
    total
}

#[test]
fn cross_entropy_matches_direct_triple_sum_on_50_cases() {
    let mut r = rng(41);
    for case in 0..50 {
        let (h, w) = (r.random_range(1..=9), r.random_range(1..=9));
        let z = random_tensor(&mut r, (1, 2, h, w)).map(|v| 4.0 * v);
        let p = softmax_channels(&z);
        let labels: Vec<bool> = (0..h * w).map(|_| r.random_bool(0.4)).collect();
        let g = Tensor4::from_fn((1, 2, h, w), |_, c, y, x| if labels[y * w + x] == (c == 1) { 1.0 } else { 0.0 });
        let (loss, grad) = cross_entropy_loss(&p, &g).unwrap();
        let oracle = direct_loss(&p, &g);
        assert!((loss - oracle).abs() <= 1e-5 * oracle.abs().max(1e-12), "case {case}");
        assert!(loss >= 0.0);
        for ((gr, pv), gv) in grad.data().iter().zip(p.data()).zip(g.data()) {
            assert_eq!(*gr, pv - gv);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-50.0f64..50.0, 2 * 3 * 4)) {
        let z = Tensor4::from_vec((1, 2, 3, 4), vals).unwrap();
        let p = softmax_channels(&z);
        for px in 0..12 {
            let (a, b) = (p.data()[px], p.data()[12 + px]);
            prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
            prop_assert!((a + b - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn maxpool_backward_conserves_gradient_mass(
        x in prop::collection::vec(-1.0f64..1.0, 2 * 4 * 6),
        g in prop::collection::vec(-1.0f64..1.0, 2 * 2 * 3),
    ) {
        let x = Tensor4::from_vec((1, 2, 4, 6), x).unwrap();
        let (_, map) = maxpool2_forward(&x).unwrap();
        let g = Tensor4::from_vec((1, 2, 2, 3), g).unwrap();
        let back = maxpool2_backward(&map, &g).unwrap();
        prop_assert!((back.sum() - g.sum()).abs() < 1e-12);
    }
}
