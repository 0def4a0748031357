//! Central finite-difference verification of every layer's backward pass.
//!
//! Checks run in `f64`. Each layer is probed through a random linear
//! projection of its output, `L = Σ r ⊙ y`, so the analytic side is the
//! layer's backward pass fed with `r`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::tensor::{
    concat_channels, conv2d_backward, conv2d_forward, cross_entropy_loss, deconv2_backward, deconv2_forward,
    maxpool2_backward, maxpool2_forward, relu_backward, relu_forward, softmax_channels, split_channels, ConvParams,
    Dims4, LayerGrad, Tensor4,
};
use crate::unet::{build, UNetSpec};

pub const FD_STEP: f64 = 1e-3;
pub const LAYER_TOLERANCE: f64 = 1e-3;
pub const NETWORK_TOLERANCE: f64 = 1e-2;
const MAX_NETWORK_ATTEMPTS: usize = 500;
/// Gradients smaller than this are compared absolutely rather than relatively.
const REL_FLOOR: f64 = 1e-6;

pub type ConvBackward = fn(&Tensor4<f64>, &ConvParams<f64>, &Tensor4<f64>) -> Result<LayerGrad<f64>>;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckReport {
    fn new(name: &str, errors: &[f64], tolerance: f64) -> Self {
        let max_rel_error = errors.iter().copied().fold(0.0, f64::max);
        let passed = errors.iter().all(|e| e.is_finite()) && max_rel_error <= tolerance;
        Self { name: name.to_string(), checked: errors.len(), max_rel_error, tolerance, passed }
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central difference of `f` with respect to `values[i]`, restoring the value afterwards.
pub fn central_difference(values: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = values[i];
    values[i] = orig + h;
    let plus = f(values);
    values[i] = orig - h;
    let minus = f(values);
    values[i] = orig;
    (plus - minus) / (2.0 * h)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, dims: impl Into<Dims4>) -> Tensor4<f64> {
    Tensor4::from_fn(dims, |_, _, _, _| rng.random_range(-1.0..1.0))
}

fn project(y: &Tensor4<f64>, r: &Tensor4<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn compare_all(analytic: &[f64], mut numeric: impl FnMut(usize) -> f64) -> Vec<f64> {
    analytic.iter().enumerate().map(|(i, &a)| rel_error(a, numeric(i))).collect()
}

pub fn check_conv2d(seed: u64) -> Result<CheckReport> {
    check_conv2d_with(seed, conv2d_backward)
}

/// Conv check with an injectable backward implementation.
pub fn check_conv2d_with(seed: u64, backward: ConvBackward) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(&mut rng, (2, 3, 4, 4));
    let w = random_tensor(&mut rng, (4, 3, 3, 3));
    let b: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let p = ConvParams::new(w, b, 1, 1)?;
    let r = random_tensor(&mut rng, conv2d_forward(&x, &p)?.dims());
    let lg = backward(&x, &p, &r)?;

    let mut errors = Vec::new();
    let mut xs = x.data().to_vec();
    errors.extend(compare_all(lg.input_grad.data(), |i| {
        central_difference(&mut xs, i, FD_STEP, |v| {
            let xt = Tensor4::from_vec(x.dims(), v.to_vec()).unwrap();
            project(&conv2d_forward(&xt, &p).unwrap(), &r)
        })
    }));
    let mut ws = p.weights.data().to_vec();
    errors.extend(compare_all(lg.weights_grad.data(), |i| {
        central_difference(&mut ws, i, FD_STEP, |v| {
            let pt = ConvParams { weights: Tensor4::from_vec(p.weights.dims(), v.to_vec()).unwrap(), ..p.clone() };
            project(&conv2d_forward(&x, &pt).unwrap(), &r)
        })
    }));
    let mut bs = p.bias.clone();
    errors.extend(compare_all(&lg.bias_grad, |i| {
        central_difference(&mut bs, i, FD_STEP, |v| {
            let pt = ConvParams { bias: v.to_vec(), ..p.clone() };
            project(&conv2d_forward(&x, &pt).unwrap(), &r)
        })
    }));
    Ok(CheckReport::new("conv2d", &errors, LAYER_TOLERANCE))
}

pub fn check_maxpool2(seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(&mut rng, (1, 2, 4, 4));
    let (y, map) = maxpool2_forward(&x)?;
    let r = random_tensor(&mut rng, y.dims());
    let g = maxpool2_backward(&map, &r)?;
    let mut xs = x.data().to_vec();
    let errors = compare_all(g.data(), |i| {
        central_difference(&mut xs, i, FD_STEP, |v| {
            let xt = Tensor4::from_vec(x.dims(), v.to_vec()).unwrap();
            project(&maxpool2_forward(&xt).unwrap().0, &r)
        })
    });
    Ok(CheckReport::new("maxpool2", &errors, LAYER_TOLERANCE))
}

pub fn check_deconv2(seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(&mut rng, (1, 2, 3, 3));
    let w = random_tensor(&mut rng, (3, 2, 2, 2));
    let b: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let p = ConvParams::new(w, b, 2, 0)?;
    let r = random_tensor(&mut rng, (1, 3, 6, 6));
    let lg = deconv2_backward(&x, &p, &r)?;

    let mut errors = Vec::new();
    let mut xs = x.data().to_vec();
    errors.extend(compare_all(lg.input_grad.data(), |i| {
        central_difference(&mut xs, i, FD_STEP, |v| {
            let xt = Tensor4::from_vec(x.dims(), v.to_vec()).unwrap();
            project(&deconv2_forward(&xt, &p).unwrap(), &r)
        })
    }));
    let mut ws = p.weights.data().to_vec();
    errors.extend(compare_all(lg.weights_grad.data(), |i| {
        central_difference(&mut ws, i, FD_STEP, |v| {
            let pt = ConvParams { weights: Tensor4::from_vec(p.weights.dims(), v.to_vec()).unwrap(), ..p.clone() };
            project(&deconv2_forward(&x, &pt).unwrap(), &r)
        })
    }));
    let mut bs = p.bias.clone();
    errors.extend(compare_all(&lg.bias_grad, |i| {
        central_difference(&mut bs, i, FD_STEP, |v| {
            let pt = ConvParams { bias: v.to_vec(), ..p.clone() };
            project(&deconv2_forward(&x, &pt).unwrap(), &r)
        })
    }));
    Ok(CheckReport::new("deconv2", &errors, LAYER_TOLERANCE))
}

pub fn check_relu(seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // keep samples away from the kink
    let x = Tensor4::from_fn((1, 2, 3, 3), |_, _, _, _| {
        let m: f64 = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    });
    let r = random_tensor(&mut rng, x.dims());
    let g = relu_backward(&x, &r)?;
    let mut xs = x.data().to_vec();
    let errors = compare_all(g.data(), |i| {
        central_difference(&mut xs, i, FD_STEP, |v| {
            project(&relu_forward(&Tensor4::from_vec(x.dims(), v.to_vec()).unwrap()), &r)
        })
    });
    Ok(CheckReport::new("relu", &errors, LAYER_TOLERANCE))
}

/// Softmax followed by the summed cross-entropy, differentiated with respect to the logits.
pub fn check_softmax_cross_entropy(seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = random_tensor(&mut rng, (1, 2, 3, 3)).map(|v| 2.0 * v);
    let g = Tensor4::from_fn((1, 2, 3, 3), {
        let labels: Vec<bool> = (0..9).map(|_| rng.random_bool(0.5)).collect();
        move |_, c, y, x| if labels[y * 3 + x] == (c == 1) { 1.0 } else { 0.0 }
    });
    let (_, grad) = cross_entropy_loss(&softmax_channels(&z), &g)?;
    let mut zs = z.data().to_vec();
    let errors = compare_all(grad.data(), |i| {
        central_difference(&mut zs, i, FD_STEP, |v| {
            let zt = Tensor4::from_vec(z.dims(), v.to_vec()).unwrap();
            cross_entropy_loss(&softmax_channels(&zt), &g).unwrap().0
        })
    });
    Ok(CheckReport::new("softmax+cross_entropy", &errors, LAYER_TOLERANCE))
}

pub fn check_concat(seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random_tensor(&mut rng, (1, 2, 3, 3));
    let b = random_tensor(&mut rng, (1, 1, 3, 3));
    let r = random_tensor(&mut rng, (1, 3, 3, 3));
    let (ga, gb) = split_channels(&r, 2)?;
    let mut errors = Vec::new();
    let mut av = a.data().to_vec();
    errors.extend(compare_all(ga.data(), |i| {
        central_difference(&mut av, i, FD_STEP, |v| {
            let at = Tensor4::from_vec(a.dims(), v.to_vec()).unwrap();
            project(&concat_channels(&at, &b).unwrap(), &r)
        })
    }));
    let mut bv = b.data().to_vec();
    errors.extend(compare_all(gb.data(), |i| {
        central_difference(&mut bv, i, FD_STEP, |v| {
            let bt = Tensor4::from_vec(b.dims(), v.to_vec()).unwrap();
            project(&concat_channels(&a, &bt).unwrap(), &r)
        })
    }));
    Ok(CheckReport::new("concat", &errors, LAYER_TOLERANCE))
}

/// Whole-network spot check: 16×16 input, depth 2, F = 2, `samples` random parameters.
///
/// Parameters whose ±step perturbation changes the activation pattern are
/// redrawn, since the central difference is not defined across a kink.
pub fn check_unet(seed: u64, samples: usize) -> Result<CheckReport> {
    let spec = UNetSpec::new(2, 2);
    let mut net = build::<f64>(&spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // non-zero biases so no unit sits exactly at a ReLU kink
    for layer in net.layers_mut() {
        for b in layer.bias.iter_mut() {
            *b = rng.random_range(-0.1..0.1);
        }
    }
    let x = Tensor4::from_fn((1, 1, 16, 16), |_, _, _, _| rng.random_range(0.0..1.0));
    let labels: Vec<bool> = (0..256).map(|_| rng.random_bool(0.5)).collect();
    let g = Tensor4::from_fn((1, 2, 16, 16), |_, c, y, xx| if labels[y * 16 + xx] == (c == 1) { 1.0 } else { 0.0 });

    let (p, cache) = net.forward_train(&x)?;
    let (_, grad_logits) = cross_entropy_loss(&p, &g)?;
    let grads = net.backward(&cache, &grad_logits)?;
    let analytic: Vec<Vec<f64>> = grads.grad_slices().iter().map(|s| s.to_vec()).collect();

    let base_pattern = cache.activation_pattern();
    let mut errors = Vec::with_capacity(samples);
    let mut attempts = 0;
    while errors.len() < samples && attempts < MAX_NETWORK_ATTEMPTS {
        attempts += 1;
        let t = rng.random_range(0..analytic.len());
        let i = rng.random_range(0..analytic[t].len());
        let orig = net.param_slices_mut()[t][i];
        let mut eval_at = |v: f64| {
            net.param_slices_mut()[t][i] = v;
            let (probs, c) = net.forward_train(&x).unwrap();
            (cross_entropy_loss(&probs, &g).unwrap().0, c.activation_pattern())
        };
        let (plus, pattern_plus) = eval_at(orig + FD_STEP);
        let (minus, pattern_minus) = eval_at(orig - FD_STEP);
        eval_at(orig);
        // a perturbation that flips a ReLU or a pooling winner straddles a kink
        if pattern_plus != base_pattern || pattern_minus != base_pattern {
            continue;
        }
        errors.push(rel_error(analytic[t][i], (plus - minus) / (2.0 * FD_STEP)));
    }
    if errors.len() < samples {
        errors.push(f64::INFINITY);
    }
    Ok(CheckReport::new("unet(16x16,depth2,F2)", &errors, NETWORK_TOLERANCE))
}

/// A named check in the suite run by the `gradcheck` command.
pub struct LayerCheck {
    pub name: &'static str,
    pub run: Box<dyn Fn(u64) -> Result<CheckReport>>,
}

impl LayerCheck {
    pub fn new(name: &'static str, run: impl Fn(u64) -> Result<CheckReport> + 'static) -> Self {
        Self { name, run: Box::new(run) }
    }
}

pub fn standard_checks() -> Vec<LayerCheck> {
    vec![
        LayerCheck::new("conv2d", check_conv2d),
        LayerCheck::new("maxpool2", check_maxpool2),
        LayerCheck::new("deconv2", check_deconv2),
        LayerCheck::new("relu", check_relu),
        LayerCheck::new("softmax+cross_entropy", check_softmax_cross_entropy),
        LayerCheck::new("concat", check_concat),
        LayerCheck::new("unet", |seed| check_unet(seed, 20)),
    ]
}

/// Runs every check; a check that errors is reported as failed with an infinite error.
pub fn run_checks(checks: &[LayerCheck], seed: u64) -> Vec<CheckReport> {
    checks
        .iter()
        .map(|c| {
            (c.run)(seed).unwrap_or_else(|_| CheckReport {
                name: c.name.to_string(),
                checked: 0,
                max_rel_error: f64::INFINITY,
                tolerance: 0.0,
                passed: false,
            })
        })
        .collect()
}
