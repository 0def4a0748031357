//! Optimizers and the per-slice training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{cross_entropy_loss, Tensor4};
use crate::unet::{UNetGrads, UNetParams};

/// Rule for "multiply the learning rate by `factor` when the loss stops decreasing".
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlateauConfig {
    /// Iterations per averaged window.
    pub window: usize,
    pub patience: usize,
    /// Minimum relative improvement of a window mean over the best so far.
    pub threshold: f64,
    pub factor: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self { window: 1000, patience: 3, threshold: 1e-4, factor: 0.1, min_lr: 1e-5 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PlateauState {
    /// Best window mean so far; seeded with the first loss ever observed.
    pub best: Option<f64>,
    pub bad_windows: usize,
}

#[derive(Clone, Debug)]
pub struct SgdState<T> {
    pub lr: f64,
    pub momentum: f64,
    pub plateau: PlateauConfig,
    pub plateau_state: PlateauState,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> SgdState<T> {
    pub fn new(lr: f64, momentum: f64, plateau: PlateauConfig) -> Self {
        Self { lr, momentum, plateau, plateau_state: PlateauState::default(), velocity: Vec::new() }
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }
}

impl<T: Scalar> Default for SgdState<T> {
    fn default() -> Self {
        Self::new(0.1, 0.9, PlateauConfig::default())
    }
}

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        Self::new(0.001)
    }
}

fn ensure_state<T: Scalar>(state: &mut Vec<Vec<T>>, grads: &[&[T]]) -> Result<()> {
    if state.is_empty() {
        *state = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
    }
    Ok(())
}

fn check_shapes<T>(params: &[&mut [T]], grads: &[&[T]], state: &[Vec<T>]) -> Result<()> {
    if params.len() != grads.len() || (!state.is_empty() && state.len() != grads.len()) {
        return shape_err(format!("{} parameter tensors but {} gradients", params.len(), grads.len()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || state.get(i).is_some_and(|s| s.len() != g.len()) {
            return shape_err(format!("tensor {i}: {} parameters but {} gradients", p.len(), g.len()));
        }
    }
    Ok(())
}

/// `v ← momentum·v + g; w ← w − lr·v` over flat parameter tensors.
pub fn sgd_step<T: Scalar>(state: &mut SgdState<T>, params: &mut [&mut [T]], grads: &[&[T]]) -> Result<()> {
    check_shapes(params, grads, &state.velocity)?;
    ensure_state(&mut state.velocity, grads)?;
    let (lr, mu) = (T::from_f64_lossy(state.lr), T::from_f64_lossy(state.momentum));
    for ((w, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        for ((w, &g), v) in w.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
            *v = mu * *v + g;
            *w -= lr * *v;
        }
    }
    Ok(())
}

/// Bias-corrected Adam step.
pub fn adam_step<T: Scalar>(state: &mut AdamState<T>, params: &mut [&mut [T]], grads: &[&[T]]) -> Result<()> {
    check_shapes(params, grads, &state.m)?;
    ensure_state(&mut state.m, grads)?;
    ensure_state(&mut state.v, grads)?;
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::from_f64_lossy(state.beta1), T::from_f64_lossy(state.beta2));
    let one = T::one();
    let c1 = T::from_f64_lossy(1.0 - state.beta1.powi(t));
    let c2 = T::from_f64_lossy(1.0 - state.beta2.powi(t));
    let (lr, eps) = (T::from_f64_lossy(state.lr), T::from_f64_lossy(state.eps));
    for (((w, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((w, &g), m), v) in w.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Feeds one completed window of losses to the plateau rule and returns the
/// (possibly reduced) learning rate.
///
/// A window improves when its mean is below `best·(1 − threshold)`, where
/// `best` starts at the first loss ever seen. After `patience` consecutive
/// windows without improvement the rate is multiplied by `factor`, floored
/// at `min_lr`, and the counter restarts.
pub fn plateau_update(lr: f64, cfg: &PlateauConfig, state: &mut PlateauState, window_losses: &[f64]) -> f64 {
    let Some(&first) = window_losses.first() else {
        return lr;
    };
    let mean = window_losses.iter().sum::<f64>() / window_losses.len() as f64;
    let best = *state.best.get_or_insert(first);
    if mean < best - cfg.threshold * best.abs() {
        state.best = Some(mean);
        state.bad_windows = 0;
        return lr;
    }
    state.bad_windows += 1;
    if state.bad_windows >= cfg.patience {
        state.bad_windows = 0;
        return (lr * cfg.factor).max(cfg.min_lr).min(lr);
    }
    lr
}

#[derive(Clone, Debug)]
pub enum Optimizer<T> {
    Sgd(SgdState<T>),
    Adam(AdamState<T>),
}

impl<T: Scalar> Optimizer<T> {
    pub fn lr(&self) -> f64 {
        match self {
            Self::Sgd(s) => s.lr,
            Self::Adam(a) => a.lr,
        }
    }

    pub fn step(&mut self, params: &mut UNetParams<T>, grads: &UNetGrads<T>) -> Result<()> {
        let g = grads.grad_slices();
        let mut p = params.param_slices_mut();
        match self {
            Self::Sgd(s) => sgd_step(s, &mut p, &g),
            Self::Adam(a) => adam_step(a, &mut p, &g),
        }
    }

    /// Called after every completed plateau window; only SGD reacts.
    fn end_window(&mut self, losses: &[f64]) {
        if let Self::Sgd(s) = self {
            s.lr = plateau_update(s.lr, &s.plateau, &mut s.plateau_state, losses);
        }
    }

    fn window(&self) -> Option<usize> {
        match self {
            Self::Sgd(s) => Some(s.plateau.window.max(1)),
            Self::Adam(_) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainLoopConfig {
    pub max_iterations: usize,
    /// Must be 1: one slice per update, no accumulation.
    pub batch_size: usize,
    pub loss_log_interval: usize,
    /// Iterations between checkpoint callbacks (0 disables them).
    pub eval_interval: usize,
    pub seed: u64,
}

impl Default for TrainLoopConfig {
    fn default() -> Self {
        Self { max_iterations: 110_000, batch_size: 1, loss_log_interval: 100, eval_interval: 10_000, seed: 0 }
    }
}

/// Network input `(1, in_c, h, w)` with its one-hot target `(1, 2, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample<T> {
    pub input: Tensor4<T>,
    pub target: Tensor4<T>,
}

impl<T: Scalar> TrainSample<T> {
    /// Builds a sample from a row-major `h × w` image and binary mask.
    pub fn from_slice(image: &[f32], mask: &[u8], h: usize, w: usize) -> Result<Self> {
        if image.len() != h * w || mask.len() != h * w {
            return shape_err(format!("slice {h}×{w} needs {} pixels, got {} and {}", h * w, image.len(), mask.len()));
        }
        let input = Tensor4::from_vec((1, 1, h, w), image.iter().map(|&v| T::from_f64_lossy(v as f64)).collect())?;
        let target = Tensor4::from_fn((1, 2, h, w), |_, c, y, x| {
            if (mask[y * w + x] != 0) == (c == 1) { T::one() } else { T::zero() }
        });
        Ok(Self { input, target })
    }
}

/// One logged row: mean loss over the last log interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    /// Loss of every iteration.
    pub losses: Vec<f64>,
    pub rows: Vec<TraceRow>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,loss,lr\n");
        for r in &self.rows {
            s.push_str(&format!("{},{:.9e},{:.9e}\n", r.iteration, r.loss, r.lr));
        }
        s
    }
}

pub type CheckpointHook<'a, T> = dyn FnMut(usize, &UNetParams<T>) -> Result<()> + 'a;

/// Trains in place for `cfg.max_iterations` single-slice steps over seeded,
/// per-epoch shuffles of `data`. `on_checkpoint` runs every `eval_interval`
/// iterations and after the last one.
pub fn train<T: Scalar>(
    params: &mut UNetParams<T>,
    data: &[TrainSample<T>],
    optimizer: &mut Optimizer<T>,
    cfg: &TrainLoopConfig,
    mut on_checkpoint: Option<&mut CheckpointHook<'_, T>>,
) -> Result<LossTrace> {
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if cfg.batch_size != 1 {
        return Err(Error::Config(format!("batch size must be 1, got {}", cfg.batch_size)));
    }
    let log_every = cfg.loss_log_interval.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut trace = LossTrace::default();
    let mut window = Vec::new();

    for it in 1..=cfg.max_iterations {
        if cursor == order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let sample = &data[order[cursor]];
        cursor += 1;

        let (probs, cache) = params.forward_train(&sample.input)?;
        let (loss, grad) = cross_entropy_loss(&probs, &sample.target)?;
        let grads = params.backward(&cache, &grad)?;
        drop(cache);
        optimizer.step(params, &grads)?;

        let loss = loss.to_f64_lossy();
        if !loss.is_finite() {
            return Err(Error::Degenerate(format!("loss became {loss} at iteration {it}")));
        }
        trace.losses.push(loss);
        if let Some(size) = optimizer.window() {
            window.push(loss);
            if window.len() == size {
                optimizer.end_window(&window);
                window.clear();
            }
        }
        if it % log_every == 0 || it == cfg.max_iterations {
            let start = trace.rows.last().map_or(0, |r| r.iteration);
            let recent = &trace.losses[start..];
            let mean = recent.iter().sum::<f64>() / recent.len() as f64;
            trace.rows.push(TraceRow { iteration: it, loss: mean, lr: optimizer.lr() });
        }
        if let Some(hook) = on_checkpoint.as_deref_mut() {
            if (cfg.eval_interval > 0 && it % cfg.eval_interval == 0) || it == cfg.max_iterations {
                hook(it, params)?;
            }
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::{build, UNetSpec};

    fn run_sgd(state: &mut SgdState<f64>, w: &mut Vec<f64>, g: &[f64]) {
        let mut p = [w.as_mut_slice()];
        sgd_step(state, &mut p, &[g]).unwrap();
    }

    #[test]
    fn sgd_hand_iteration() {
        let mut s = SgdState::<f64>::default();
        let mut w = vec![0.0];
        run_sgd(&mut s, &mut w, &[1.0]);
        assert!((w[0] + 0.1).abs() < 1e-15);
        let before = w[0];
        run_sgd(&mut s, &mut w, &[1.0]);
        assert!((w[0] - before + 0.19).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_lr_still_accumulates() {
        let mut s = SgdState::<f64>::new(0.0, 0.9, PlateauConfig::default());
        let mut w = vec![1.0, 2.0];
        run_sgd(&mut s, &mut w, &[1.0, -1.0]);
        run_sgd(&mut s, &mut w, &[1.0, -1.0]);
        assert_eq!(w, vec![1.0, 2.0]);
        assert_eq!(s.velocity()[0], vec![1.9, -1.9]);
        let mut z = SgdState::<f64>::default();
        run_sgd(&mut z, &mut w, &[0.0, 0.0]);
        assert_eq!(w, vec![1.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut s = SgdState::<f32>::default();
        let mut w = vec![0.0f32; 3];
        let mut p = [w.as_mut_slice()];
        assert!(matches!(sgd_step(&mut s, &mut p, &[&[1.0, 2.0]]), Err(Error::Shape(_))));
        sgd_step(&mut s, &mut p, &[&[1.0, 2.0, 3.0]]).unwrap();
        let mut w4 = vec![0.0f32; 4];
        let mut p4 = [w4.as_mut_slice()];
        assert!(matches!(sgd_step(&mut s, &mut p4, &[&[0.0; 4]]), Err(Error::Shape(_))));
        let mut a = AdamState::<f32>::default();
        assert!(matches!(adam_step(&mut a, &mut p, &[&[1.0]]), Err(Error::Shape(_))));
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut a = AdamState::<f64>::default();
        let mut w = vec![0.0, 0.0, 0.0];
        {
            let mut p = [w.as_mut_slice()];
            adam_step(&mut a, &mut p, &[&[0.0, 0.0, 0.0]]).unwrap();
        }
        assert_eq!(w, vec![0.0; 3]);

        let mut a = AdamState::<f64>::default();
        let g = [3.0, -0.5, 1e-3];
        let mut w = vec![0.0; 3];
        let mut p = [w.as_mut_slice()];
        adam_step(&mut a, &mut p, &[&g]).unwrap();
        for (wi, gi) in w.iter().zip(g) {
            // m̂/√v̂ = sign(g); only eps shrinks the step
            let expected = -0.001 * gi.signum() * gi.abs() / (gi.abs() + 1e-8);
            assert!((wi - expected).abs() < 1e-15, "{wi} vs {expected}");
        }
        let first = w.clone();
        let mut p = [w.as_mut_slice()];
        adam_step(&mut a, &mut p, &[&g]).unwrap();
        for i in 0..3 {
            assert!((w[i] - first[i]).abs() <= first[i].abs() + 1e-9);
        }
    }

    #[test]
    fn plateau_rule() {
        let cfg = PlateauConfig { window: 4, ..PlateauConfig::default() };
        let mut st = PlateauState::default();
        let mut lr = 0.1;
        let mut loss = 10.0;
        for _ in 0..20 {
            let w: Vec<f64> = (0..4).map(|_| { loss *= 0.99; loss }).collect();
            lr = plateau_update(lr, &cfg, &mut st, &w);
        }
        assert_eq!(lr, 0.1);

        // constant losses over patience windows trigger exactly one decay
        let mut st = PlateauState::default();
        let mut lr = 0.1;
        for k in 0..cfg.patience {
            lr = plateau_update(lr, &cfg, &mut st, &[2.0; 4]);
            assert_eq!(lr, if k + 1 < cfg.patience { 0.1 } else { 0.010000000000000002 });
        }

        let mut st = PlateauState::default();
        let mut lr = 1e-5;
        for _ in 0..12 {
            lr = plateau_update(lr, &cfg, &mut st, &[2.0; 4]);
        }
        assert_eq!(lr, 1e-5);
    }

    fn disc_sample(n: usize) -> TrainSample<f32> {
        let c = (n as f32 - 1.0) / 2.0;
        let mask: Vec<u8> = (0..n * n)
            .map(|i| {
                let (y, x) = ((i / n) as f32, (i % n) as f32);
                u8::from((y - c).powi(2) + (x - c).powi(2) <= 16.0)
            })
            .collect();
        let image: Vec<f32> = mask.iter().map(|&m| if m == 1 { 0.8 } else { 0.2 }).collect();
        TrainSample::from_slice(&image, &mask, n, n).unwrap()
    }

    #[test]
    fn overfits_single_disc() {
        let mut net = build::<f32>(&UNetSpec::new(2, 4), 11).unwrap();
        let data = [disc_sample(16)];
        let cfg = TrainLoopConfig { max_iterations: 200, loss_log_interval: 50, seed: 1, ..Default::default() };
        let mut opt = Optimizer::Adam(AdamState::default());
        let trace = train(&mut net, &data, &mut opt, &cfg, None).unwrap();
        let (first, last) = (trace.losses[0], *trace.losses.last().unwrap());
        assert!(last < 0.05 * first, "loss {first} -> {last}");
        assert_eq!(trace.rows.len(), 4);
        assert!(trace.to_csv().starts_with("iteration,loss,lr\n50,"));
    }

    #[test]
    fn training_is_deterministic_and_respects_zero_iterations() {
        let spec = UNetSpec::new(1, 2);
        let data = [disc_sample(8), disc_sample(8)];
        let cfg = TrainLoopConfig { max_iterations: 7, eval_interval: 3, seed: 4, ..Default::default() };
        let run = || {
            let mut net = build::<f32>(&spec, 2).unwrap();
            let mut seen = Vec::new();
            let mut hook = |it: usize, _: &UNetParams<f32>| {
                seen.push(it);
                Ok(())
            };
            let mut opt = Optimizer::Sgd(SgdState::new(0.01, 0.9, PlateauConfig { window: 2, ..Default::default() }));
            let t = train(&mut net, &data, &mut opt, &cfg, Some(&mut hook)).unwrap();
            (t, seen, net)
        };
        let (a, seen, net_a) = run();
        let (b, _, net_b) = run();
        assert_eq!(a, b);
        assert_eq!(net_a, net_b);
        assert_eq!(seen, vec![3, 6, 7]);

        let mut net = build::<f32>(&spec, 2).unwrap();
        let zero = TrainLoopConfig { max_iterations: 0, ..cfg };
        train(&mut net, &data, &mut Optimizer::Adam(AdamState::default()), &zero, None).unwrap();
        assert_eq!(net, build::<f32>(&spec, 2).unwrap());
        assert!(matches!(
            train(&mut net, &[], &mut Optimizer::Adam(AdamState::default()), &zero, None),
            Err(Error::Config(_))
        ));
    }
}
